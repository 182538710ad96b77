//! Full model assembly: CNN encoder -> attention core -> hierarchical LSTM
//! -> reconstruction heads, plus the per-episode training loss and the
//! per-step inference path.
//!
//! Data flow for one step (teacher-forced training):
//!
//! ```text
//!   frame_t -> encoder -> f_bu ----spatial softmax----> m_bu --argmax--> pt_bu
//!                      \-> f_td --(m_bu mask avg)-----> q_bu
//!   h_shared_{t-1} -> TD query MLP -> q_td --fusion(q_bu)--> q_a
//!   q_a . f_td -> similarity maps -> soft-argmax -> pt_td
//!   (pt_td, pt_bu, joints_t) -> H-LSTM -> predictions for t+1
//!   pred.pt_bu -> peripheral decoder (masked f_td) -> next-frame estimate
//!   f_td crops at pt_td / pred.pt_td -> foveal codec -> patch estimates
//! ```
//!
//! The predictions made at `t` are scored against step `t + 1`; the loss
//! assembly in [`Model::episode_loss`] owns that alignment.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    extract_bu_points, pseudo_queries_t, td_points_t, AttentionMaps, Fusion, FusionMlp,
    FusionTransformer, TdQueryMlp,
};
use crate::config::{FusionMode, ModelConfig};
use crate::losses::{
    bounds_penalty, compose, hinge_displacement, seq_mse, ComposedLoss, LossWeights, TermVars,
};
use crate::recurrent::{HLstm, HLstmDims, State, StateArrays};
use crate::reconstruction::{foveal_targets, FovealCodec, PeripheralDecoder};
use crate::tensor::{xavier_uniform, Leaves, ParamId, ParamSet, Scalar, Tape, Var};
use crate::Result;

/// Convolutional trunk: patchify to the feature grid, mix, then project to
/// the BU and TD feature heads.
struct Encoder {
    patch_w: ParamId,
    patch_b: ParamId,
    mix_w: ParamId,
    mix_b: ParamId,
    bu_w: ParamId,
    bu_b: ParamId,
    td_w: ParamId,
    td_b: ParamId,
}

impl Encoder {
    fn new<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let m = cfg.enc_mid;
        let conv = |ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize, k: usize| {
            let w = ps.register(
                &format!("enc.{name}.w"),
                xavier_uniform(rng, &[o, i, k, k], i * k * k, o),
            );
            let b = ps.register(&format!("enc.{name}.b"), ArrayD::zeros(IxDyn(&[o])));
            (w, b)
        };
        let (patch_w, patch_b) = conv(ps, rng, "patch", m, 3, 4);
        let (mix_w, mix_b) = conv(ps, rng, "mix", m, m, 3);
        let (bu_w, bu_b) = conv(ps, rng, "bu", cfg.n_bu, m, 1);
        let (td_w, td_b) = conv(ps, rng, "td", cfg.d_td, m, 1);
        Encoder {
            patch_w,
            patch_b,
            mix_w,
            mix_b,
            bu_w,
            bu_b,
            td_w,
            td_b,
        }
    }

    /// `frame [3, H, W]` -> `(f_bu [N_BU, g, g], f_td [D_TD, g, g])`.
    fn forward<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        frame: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let trunk = frame
            .conv2d(lv.get(self.patch_w), lv.get(self.patch_b), 4, 0)
            .relu()
            .conv2d(lv.get(self.mix_w), lv.get(self.mix_b), 1, 1)
            .relu();
        let f_bu = trunk.conv2d(lv.get(self.bu_w), lv.get(self.bu_b), 1, 0);
        let f_td = trunk.conv2d(lv.get(self.td_w), lv.get(self.td_b), 1, 0);
        (f_bu, f_td)
    }
}

/// The assembled network. Parameters live in a separate [`ParamSet`]; the
/// model holds only ids and wiring, so one model instance serves both f32
/// training and f64 gradient checking.
pub struct Model {
    /// The configuration the model was built from.
    pub cfg: ModelConfig,
    encoder: Encoder,
    td_mlp: TdQueryMlp,
    fusion: Fusion,
    hlstm: HLstm,
    peripheral: Option<PeripheralDecoder>,
    foveal: Option<FovealCodec>,
}

/// Everything the forward pass produces at one step.
pub struct StepData<'t, F: Scalar> {
    /// TD feature map `[D_TD, g, g]`.
    pub f_td: Var<'t, F>,
    /// Normalized BU attention maps `[N_BU, g, g]`.
    pub m_bu: Var<'t, F>,
    /// BU points (hard argmax; constant w.r.t. the tape) `[N_BU, 2]`.
    pub pt_bu: Var<'t, F>,
    /// BU pseudo-queries `[N_BU, D_TD]`.
    pub q_bu: Var<'t, F>,
    /// Amalgamated queries `[N_TD, D_TD]`.
    pub q_a: Var<'t, F>,
    /// TD attention maps `[N_TD, g, g]`.
    pub m_td: Var<'t, F>,
    /// TD points (soft-argmax) `[N_TD, 2]`.
    pub pt_td: Var<'t, F>,
    /// Next-step predictions from the H-LSTM.
    pub pred: crate::recurrent::Prediction<'t, F>,
    /// Recurrent state after this step.
    pub state: State<'t, F>,
}

/// Per-step values captured during inference, as plain arrays.
#[derive(Debug, Clone)]
pub struct InferStep<F: Scalar> {
    /// TD points `[N_TD, 2]`.
    pub pt_td: Array2<F>,
    /// BU points `[N_BU, 2]`.
    pub pt_bu: Array2<F>,
    /// Summed BU attention map `[g, g]` (for saliency rendering).
    pub m_bu_sum: Array2<F>,
    /// Predicted next joints `[D_J]`.
    pub joint_hat: Array1<F>,
    /// Predicted next TD points `[N_TD, 2]`.
    pub pt_td_hat: Array2<F>,
    /// Predicted next BU points `[N_BU, 2]`.
    pub pt_bu_hat: Array2<F>,
    /// Per-head similarity between amalgamated and BU pseudo-queries.
    pub similarity: Array1<F>,
}

/// Build a model and its freshly initialized parameters from a config.
/// Identical `(config, F)` produce identical parameters.
pub fn build_model<F: Scalar>(cfg: &ModelConfig) -> Result<(Model, ParamSet<F>)> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = Encoder::new(&mut ps, &mut rng, cfg);
    let td_mlp = TdQueryMlp::new(
        &mut ps,
        &mut rng,
        cfg.shared_width,
        cfg.td_mlp_hidden,
        cfg.n_td,
        cfg.d_td,
        "td_mlp",
    );
    let fusion = match cfg.fusion {
        FusionMode::Transformer => Fusion::Transformer(FusionTransformer::new(
            &mut ps,
            &mut rng,
            cfg.d_td,
            cfg.fusion_heads,
            cfg.fusion_cross_only,
            "fusion",
        )),
        FusionMode::Mlp => Fusion::Mlp(FusionMlp::new(&mut ps, &mut rng, cfg.d_td, "fusion")),
        FusionMode::None => Fusion::Off,
    };
    let hlstm = HLstm::new(
        &mut ps,
        &mut rng,
        HLstmDims {
            n_td: cfg.n_td,
            n_bu: cfg.n_bu,
            d_joint: cfg.d_joint,
            modality_width: cfg.modality_width,
            shared_width: cfg.shared_width,
            proj_width: cfg.proj_width,
        },
        "hlstm",
    );
    let peripheral = cfg.peripheral.then(|| {
        PeripheralDecoder::new(&mut ps, &mut rng, cfg.d_td, cfg.per_mid, cfg.per_narrow, "per")
    });
    let foveal = cfg
        .foveal
        .then(|| FovealCodec::new(&mut ps, &mut rng, cfg.d_td, cfg.fov_mid, "fov"));
    Ok((
        Model {
            cfg: cfg.clone(),
            encoder,
            td_mlp,
            fusion,
            hlstm,
            peripheral,
            foveal,
        },
        ps,
    ))
}

/// One episode converted to the training scalar type.
pub struct EpisodeData<F: Scalar> {
    /// Frames `[T][3, H, W]` in `[0, 1]`.
    pub frames: Vec<Array3<F>>,
    /// Joints `[T][D_J]` in `[0, 1]`.
    pub joints: Vec<Array1<F>>,
}

impl<F: Scalar> EpisodeData<F> {
    /// Convert a stored episode (truncating to `max_steps` if given).
    pub fn from_episode(ep: &crate::env::Episode, max_steps: Option<usize>) -> Self {
        let t = max_steps
            .unwrap_or(usize::MAX)
            .min(ep.frames.dim().0);
        let scale = F::cast(1.0 / 255.0);
        let frames = (0..t)
            .map(|k| {
                ep.frames
                    .index_axis(Axis(0), k)
                    .mapv(|v| F::cast(v as f64) * scale)
            })
            .collect();
        let joints = (0..t)
            .map(|k| ep.joints.row(k).mapv(|v| F::cast(v as f64)))
            .collect();
        EpisodeData { frames, joints }
    }
}

/// Scalar values of the episode loss plus the per-head query similarity.
pub struct EpisodeOutcome<F: Scalar> {
    /// Loss components.
    pub breakdown: crate::losses::LossBreakdown,
    /// Out-of-bounds sub-terms (encoder side, decoder side).
    pub bounds_sides: (f64, f64),
    /// Mean-over-time per-head max-over-BU cosine similarity `[N_TD]`.
    pub similarity: Array1<F>,
}

impl Model {
    /// Dimensions of the recurrent stack.
    pub fn hlstm_dims(&self) -> &HLstmDims {
        self.hlstm.dims()
    }

    /// Zero recurrent state as plain arrays.
    pub fn init_state<F: Scalar>(&self) -> StateArrays<F> {
        StateArrays::zeros(self.hlstm.dims())
    }

    /// One taped forward step. `frame` and `joints` are tape nodes (usually
    /// constants); `state` carries the recurrent context.
    pub fn step<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        frame: Var<'t, F>,
        joints: Var<'t, F>,
        state: &State<'t, F>,
    ) -> Result<StepData<'t, F>> {
        let tape = frame.tape();
        let (f_bu, f_td) = self.encoder.forward(lv, frame);
        let m_bu = f_bu.spatial_softmax(F::cast(self.cfg.tau_bu));
        // Hard argmax is non-differentiable; BU points enter the graph as
        // constants (the maps themselves still carry gradient via q_bu).
        let maps = AttentionMaps::new(
            m_bu.to_array()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("m_bu is 3-d"),
        )?;
        let pt_bu = tape.constant(extract_bu_points(&maps).into_dyn());
        let q_bu = pseudo_queries_t(m_bu, f_td);
        let q_td = self.td_mlp.forward(lv, state.h_shared);
        let q_a = self.fusion.forward(lv, q_td, q_bu);
        let (m_td, pt_td) = td_points_t(q_a, f_td, F::cast(self.cfg.tau_td));
        let (pred, state) = self.hlstm.step(lv, pt_td, pt_bu, joints, state);
        Ok(StepData {
            f_td,
            m_bu,
            pt_bu,
            q_bu,
            q_a,
            m_td,
            pt_td,
            pred,
            state,
        })
    }

    /// Full teacher-forced episode loss on `tape`.
    pub fn episode_loss<'t, F: Scalar>(
        &self,
        tape: &'t Tape<F>,
        lv: &Leaves<'t, F>,
        data: &EpisodeData<F>,
    ) -> Result<(ComposedLoss<'t, F>, EpisodeOutcome<F>)> {
        let t_len = data.frames.len();
        assert!(t_len >= 2, "episode must have at least 2 steps");
        assert_eq!(t_len, data.joints.len());
        let weights = LossWeights::new(self.cfg.alpha, self.cfg.beta)?;

        let mut state = State::from_arrays(tape, &self.init_state());
        let mut joint_hat = Vec::with_capacity(t_len);
        let mut joint_true = Vec::with_capacity(t_len);
        let mut frames_v = Vec::with_capacity(t_len);
        let mut per_pred = Vec::with_capacity(t_len);
        let mut fov_enc = Vec::with_capacity(t_len);
        let mut fov_enc_tgt = Vec::with_capacity(t_len);
        let mut fov_dec = Vec::with_capacity(t_len);
        let mut fov_dec_tgt = Vec::with_capacity(t_len);
        let mut pt_bu_enc = Vec::with_capacity(t_len);
        let mut pt_bu_hat = Vec::with_capacity(t_len);
        let mut pt_td_enc = Vec::with_capacity(t_len);
        let mut pt_td_hat = Vec::with_capacity(t_len);
        let mut sim_acc = Array1::<F>::zeros(self.cfg.n_td);

        for t in 0..t_len {
            let frame = tape.constant(data.frames[t].clone().into_dyn());
            let joints = tape.constant(data.joints[t].clone().into_dyn());
            let step = self.step(lv, frame, joints, &state)?;

            sim_acc = sim_acc
                + &query_similarity_step(
                    &step.q_a.to_array().into_dimensionality().unwrap(),
                    &step.q_bu.to_array().into_dimensionality().unwrap(),
                );

            joint_true.push(joints);
            joint_hat.push(step.pred.joint);
            frames_v.push(frame);
            pt_bu_enc.push(step.pt_bu);
            pt_bu_hat.push(step.pred.pt_bu);
            pt_td_enc.push(step.pt_td);
            pt_td_hat.push(step.pred.pt_td);

            if let Some(per) = &self.peripheral {
                let (rgb, _mask) = per.forward(lv, step.pred.pt_bu, step.f_td);
                per_pred.push(rgb);
            }
            if let Some(fov) = &self.foveal {
                // Encoder side: crop at the current TD points, reconstruct
                // the current frame.
                let pt_td_plain: Array2<F> =
                    step.pt_td.to_array().into_dimensionality().unwrap();
                fov_enc.push(fov.crop_and_decode(lv, step.f_td, &pt_td_plain));
                fov_enc_tgt.push(
                    tape.constant(foveal_targets(&data.frames[t], &pt_td_plain).into_dyn()),
                );
                // Decoder side: crop at the predicted TD points, reconstruct
                // the next frame (target exists for t < T-1).
                let pt_hat_plain: Array2<F> =
                    step.pred.pt_td.to_array().into_dimensionality().unwrap();
                fov_dec.push(fov.crop_and_decode(lv, step.f_td, &pt_hat_plain));
                if t + 1 < t_len {
                    fov_dec_tgt.push(tape.constant(
                        foveal_targets(&data.frames[t + 1], &pt_hat_plain).into_dyn(),
                    ));
                }
            }
            state = step.state;
        }

        let enc_bounds = bounds_penalty(tape, &pt_td_enc);
        let dec_bounds = bounds_penalty(tape, &pt_td_hat);
        let terms = TermVars {
            body: seq_mse(tape, &joint_hat, &joint_true, 1),
            rec_per: self
                .peripheral
                .as_ref()
                .map(|_| seq_mse(tape, &per_pred, &frames_v, 1)),
            rec_fov_enc: self
                .foveal
                .as_ref()
                .map(|_| seq_mse(tape, &fov_enc, &fov_enc_tgt, 0)),
            rec_fov_dec: self
                .foveal
                .as_ref()
                .map(|_| seq_mse(tape, &fov_dec[..t_len - 1], &fov_dec_tgt, 0)),
            reg_bu_consist: self
                .cfg
                .consistency
                .then(|| seq_mse(tape, &pt_bu_hat, &pt_bu_enc, 1)),
            reg_fov_consist: self
                .cfg
                .consistency
                .then(|| seq_mse(tape, &fov_dec, &fov_enc, 1)),
            reg_displacement: self
                .cfg
                .spatial
                .then(|| hinge_displacement(tape, &pt_td_enc)),
            reg_bounds: self.cfg.spatial.then(|| enc_bounds.add(dec_bounds)),
        };
        let composed = compose(&terms, &weights)?;
        let outcome = EpisodeOutcome {
            breakdown: composed.breakdown,
            bounds_sides: if self.cfg.spatial {
                (enc_bounds.scalar().as_f64(), dec_bounds.scalar().as_f64())
            } else {
                (0.0, 0.0)
            },
            similarity: sim_acc.mapv(|v| v / F::cast(t_len as f64)),
        };
        Ok((composed, outcome))
    }

    /// One inference step on a private throwaway tape. Returns the step
    /// outputs as plain arrays together with the new recurrent state.
    pub fn infer_step<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        frame: &Array3<F>,
        joints: &Array1<F>,
        state: &StateArrays<F>,
    ) -> Result<(InferStep<F>, StateArrays<F>)> {
        let tape = Tape::new();
        let lv = Leaves::new(&tape, ps);
        let state_v = State::from_arrays(&tape, state);
        let step = self.step(
            &lv,
            tape.constant(frame.clone().into_dyn()),
            tape.constant(joints.clone().into_dyn()),
            &state_v,
        )?;
        let q_a: Array2<F> = step.q_a.to_array().into_dimensionality().unwrap();
        let q_bu: Array2<F> = step.q_bu.to_array().into_dimensionality().unwrap();
        let m_bu: Array3<F> = step.m_bu.to_array().into_dimensionality().unwrap();
        let out = InferStep {
            pt_td: step.pt_td.to_array().into_dimensionality().unwrap(),
            pt_bu: step.pt_bu.to_array().into_dimensionality().unwrap(),
            m_bu_sum: m_bu.sum_axis(Axis(0)),
            joint_hat: step.pred.joint.to_array().into_dimensionality().unwrap(),
            pt_td_hat: step.pred.pt_td.to_array().into_dimensionality().unwrap(),
            pt_bu_hat: step.pred.pt_bu.to_array().into_dimensionality().unwrap(),
            similarity: query_similarity_step(&q_a, &q_bu),
        };
        let new_state = step.state.to_arrays();
        Ok((out, new_state))
    }
}

/// Per-head max-over-BU cosine similarity for one step:
/// `sim[k] = max_j cos(q_a[k], q_bu[j])`.
pub fn query_similarity_step<F: Scalar>(q_a: &Array2<F>, q_bu: &Array2<F>) -> Array1<F> {
    let eps = F::cast(1e-12);
    let n_td = q_a.nrows();
    let mut out = Array1::zeros(n_td);
    for k in 0..n_td {
        let a = q_a.row(k);
        let na = a.dot(&a).sqrt().max(eps);
        let mut best = F::cast(-1.0);
        for j in 0..q_bu.nrows() {
            let b = q_bu.row(j);
            let nb = b.dot(&b).sqrt().max(eps);
            let cos = a.dot(&b) / (na * nb);
            if cos > best {
                best = cos;
            }
        }
        out[k] = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{apply_variant, VariantKind};
    use crate::env::{generate_episode, EnvConfig};
    use crate::tensor::fd;

    /// A tiny config that keeps conv work negligible in tests.
    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_td: 2,
            n_bu: 3,
            d_td: 8,
            grid: 4,
            image: 16,
            modality_width: 8,
            shared_width: 6,
            proj_width: 4,
            td_mlp_hidden: 8,
            fusion_heads: 2,
            enc_mid: 4,
            per_mid: 3,
            per_narrow: 2,
            fov_mid: 3,
            ..ModelConfig::default()
        }
    }

    fn tiny_episode<F: Scalar>(t: usize, seed: u64) -> EpisodeData<F> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EpisodeData {
            frames: (0..t)
                .map(|_| Array3::from_shape_fn((3, 16, 16), |_| F::cast(rng.gen_range(0.0..1.0))))
                .collect(),
            joints: (0..t)
                .map(|_| Array1::from_shape_fn(4, |_| F::cast(rng.gen_range(0.0..1.0))))
                .collect(),
        }
    }

    #[test]
    fn all_six_variants_build_and_run_one_episode() {
        let base = tiny_cfg();
        let data = tiny_episode::<f64>(3, 1);
        for kind in VariantKind::all() {
            let cfg = apply_variant(&base, kind);
            let (model, ps) = build_model::<f64>(&cfg).unwrap();
            let tape = Tape::new();
            let lv = Leaves::new(&tape, &ps);
            let (loss, outcome) = model.episode_loss(&tape, &lv, &data).unwrap();
            assert!(
                loss.total.scalar().is_finite(),
                "{kind:?}: non-finite loss"
            );
            // Disabled terms must report exactly 0.
            if !cfg.peripheral {
                assert_eq!(outcome.breakdown.rec_per, 0.0, "{kind:?}");
            }
            if !cfg.foveal {
                assert_eq!(outcome.breakdown.rec_fov_enc, 0.0, "{kind:?}");
            }
            if !cfg.consistency {
                assert_eq!(outcome.breakdown.reg_bu_consist, 0.0, "{kind:?}");
            }
            if !cfg.spatial {
                assert_eq!(outcome.breakdown.reg_displacement, 0.0, "{kind:?}");
            }
        }
    }

    #[test]
    fn variant_flags_control_which_parameters_exist() {
        let base = tiny_cfg();
        let has = |cfg: &ModelConfig, prefix: &str| {
            let (_, ps) = build_model::<f32>(cfg).unwrap();
            ps.ids().any(|id| ps.name(id).starts_with(prefix))
        };
        let a2 = apply_variant(&base, VariantKind::A2rnn);
        assert!(!has(&a2, "fusion."));
        assert!(!has(&a2, "per."));
        assert!(!has(&a2, "fov."));
        let v1 = apply_variant(&base, VariantKind::V1);
        assert!(has(&v1, "fusion.") && has(&v1, "per.") && !has(&v1, "fov."));
        let prop = apply_variant(&base, VariantKind::Proposed);
        assert!(has(&prop, "fusion.") && has(&prop, "per.") && has(&prop, "fov."));
    }

    #[test]
    fn build_is_deterministic_in_the_seed() {
        let cfg = tiny_cfg();
        let (_, ps1) = build_model::<f64>(&cfg).unwrap();
        let (_, ps2) = build_model::<f64>(&cfg).unwrap();
        for (a, b) in ps1.iter().zip(ps2.iter()) {
            assert_eq!(a.1, b.1);
        }
        let data = tiny_episode::<f64>(3, 2);
        let (model, ps) = build_model::<f64>(&cfg).unwrap();
        let run = || {
            let tape = Tape::new();
            let lv = Leaves::new(&tape, &ps);
            model.episode_loss(&tape, &lv, &data).unwrap().0.breakdown
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn open_loop_inference_reproduces_training_forward() {
        // Stepping with infer_step on the same teacher inputs must produce
        // the same outputs as the taped training pass.
        let cfg = tiny_cfg();
        let (model, ps) = build_model::<f64>(&cfg).unwrap();
        let data = tiny_episode::<f64>(4, 3);

        // Taped pass.
        let tape = Tape::new();
        let lv = Leaves::new(&tape, &ps);
        let mut state = State::from_arrays(&tape, &model.init_state());
        let mut taped_joints = Vec::new();
        let mut taped_pts = Vec::new();
        for t in 0..4 {
            let step = model
                .step(
                    &lv,
                    tape.constant(data.frames[t].clone().into_dyn()),
                    tape.constant(data.joints[t].clone().into_dyn()),
                    &state,
                )
                .unwrap();
            taped_joints.push(step.pred.joint.to_array());
            taped_pts.push(step.pt_td.to_array());
            state = step.state;
        }

        // Per-step inference pass.
        let mut arr_state = model.init_state();
        for t in 0..4 {
            let (out, next) = model
                .infer_step(&ps, &data.frames[t], &data.joints[t], &arr_state)
                .unwrap();
            arr_state = next;
            assert_eq!(out.joint_hat.clone().into_dyn(), taped_joints[t]);
            assert_eq!(out.pt_td.clone().into_dyn(), taped_pts[t]);
        }
    }

    #[test]
    fn td_and_bu_points_stay_in_the_unit_square() {
        let cfg = tiny_cfg();
        let (model, ps) = build_model::<f64>(&cfg).unwrap();
        let data = tiny_episode::<f64>(3, 4);
        let mut state = model.init_state();
        for t in 0..3 {
            let (out, next) = model
                .infer_step(&ps, &data.frames[t], &data.joints[t], &state)
                .unwrap();
            state = next;
            for &v in out.pt_td.iter().chain(out.pt_bu.iter()) {
                assert!((0.0..=1.0).contains(&v), "point coord {v}");
            }
        }
    }

    #[test]
    fn similarity_matches_cosine_identities() {
        // q_a equal to a q_bu row -> similarity exactly 1.
        let q_bu: Array2<f64> = ndarray::arr2(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let q_a = ndarray::arr2(&[[0.0, 4.0, 0.0]]);
        let s = query_similarity_step(&q_a, &q_bu);
        assert!((s[0] - 1.0).abs() < 1e-12);

        // q_a orthogonal to every q_bu row -> 0.
        let q_a = ndarray::arr2(&[[0.0, 0.0, 3.0]]);
        let s = query_similarity_step(&q_a, &q_bu);
        assert!(s[0].abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_loop_oracle_on_random_data() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q_a: Array2<f64> = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
            let q_bu = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
            let fast = query_similarity_step(&q_a, &q_bu);
            for k in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for j in 0..4 {
                    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                    for d in 0..5 {
                        dot += q_a[[k, d]] * q_bu[[j, d]];
                        na += q_a[[k, d]] * q_a[[k, d]];
                        nb += q_bu[[j, d]] * q_bu[[j, d]];
                    }
                    best = best.max(dot / (na.sqrt() * nb.sqrt()));
                }
                assert!((fast[k] - best).abs() < 1e-12);
            }
        }
    }

    /// Shift every ReLU-feeding bias so pre-activations sit away from the
    /// kink at 0; a finite-difference step straddling the kink would turn
    /// the numeric gradient into noise without indicating a real defect.
    fn nudge_relu_biases<F: Scalar>(ps: &mut ParamSet<F>) {
        let relu_biases = [
            "enc.patch.b",
            "enc.mix.b",
            "td_mlp.b1",
            "fusion.enc.ff.b1",
            "fusion.dec.ff.b1",
            "per.d1.b",
            "per.d2.b",
            "fov.d1.b",
        ];
        for id in ps.ids().collect::<Vec<_>>() {
            if relu_biases.contains(&ps.name(id)) {
                ps.value_mut(id).mapv_inplace(|v| v + F::cast(0.35));
            }
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences_on_tiny_model() {
        // The end-to-end chain rule check: encoder convs, spatial softmax,
        // fusion, soft-argmax, H-LSTM BPTT, both reconstruction pathways and
        // every loss term, differentiated together.
        let cfg = tiny_cfg();
        let (model, mut ps) = build_model::<f64>(&cfg).unwrap();
        nudge_relu_biases(&mut ps);
        let data = tiny_episode::<f64>(3, 6);
        let build = fd::objective(move |tape: &Tape<f64>, ps: &ParamSet<f64>| {
            let lv = Leaves::new(tape, ps);
            model.episode_loss(tape, &lv, &data).unwrap().0.total
        });
        let max_rel = fd::max_param_rel_error(build, &mut ps, 1e-4, 4, 11);
        assert!(max_rel < 1e-3, "total loss rel error {max_rel}");
    }

    #[test]
    fn scripted_episode_trains_loss_with_real_frames() {
        // Smoke test against the actual renderer output rather than noise.
        let env = EnvConfig::default();
        let ep = generate_episode(&env, 1, 9).unwrap();
        let data = EpisodeData::<f64>::from_episode(&ep, Some(6));
        let cfg = ModelConfig {
            grid: 16,
            image: 64,
            ..tiny_cfg()
        };
        let (model, ps) = build_model::<f64>(&cfg).unwrap();
        let tape = Tape::new();
        let lv = Leaves::new(&tape, &ps);
        let (loss, outcome) = model.episode_loss(&tape, &lv, &data).unwrap();
        assert!(loss.total.scalar().is_finite());
        for &s in outcome.similarity.iter() {
            assert!((-1.0..=1.0).contains(&s), "similarity {s} out of range");
        }
    }
}
