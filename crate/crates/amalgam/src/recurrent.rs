//! Hierarchical LSTM over attention points and proprioception.
//!
//! Three modality LSTMs (TD points, BU points, joint angles) run side by
//! side; a narrower shared LSTM consumes their hidden states and feeds a
//! projection of its own previous hidden state back into every modality
//! input. That projection is the only route by which one modality can
//! influence another — zero it and the modalities decouple (a property the
//! tests pin down). The previous shared hidden state is also what the
//! attention core's TD query MLP reads, closing the perception-action loop.
//!
//! Per step, with teacher-forced inputs `pt_td(t), pt_bu(t), joint(t)`:
//!
//! ```text
//!   proj      = tanh(W_p . h_shared(t-1) + b_p)
//!   h_m(t)    = LSTM_m([input_m(t); proj])          for m in {td, bu, joint}
//!   h_sh(t)   = LSTM_sh([h_td(t); h_bu(t); h_joint(t)])
//!   output_m  = W_m . h_m(t) + b_m                  (next-step predictions)
//! ```

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;

use crate::tensor::ops::concat;
use crate::tensor::{xavier_uniform, Leaves, ParamId, ParamSet, Scalar, Tape, Var};

/// Widths and input sizes of the hierarchical LSTM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HLstmDims {
    /// Number of top-down attention points.
    pub n_td: usize,
    /// Number of bottom-up attention points.
    pub n_bu: usize,
    /// Joint vector width (arm joints + gripper).
    pub d_joint: usize,
    /// Hidden width of each modality LSTM.
    pub modality_width: usize,
    /// Hidden width of the shared LSTM.
    pub shared_width: usize,
    /// Width of the shared-state projection fed back to modalities.
    pub proj_width: usize,
}

/// One LSTM layer (fused cell step).
#[derive(Debug, Clone)]
struct LstmLayer {
    w: ParamId,
    b: ParamId,
    width: usize,
}

impl LstmLayer {
    fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        in_dim: usize,
        width: usize,
        prefix: &str,
    ) -> Self {
        let w = ps.register(
            &format!("{prefix}.w"),
            xavier_uniform(rng, &[4 * width, in_dim + width], in_dim + width, width),
        );
        // Forget-gate bias starts at 1 so early training does not wipe the
        // cell state (rows [width, 2*width) in gate order i, f, g, o).
        let mut bias = ArrayD::zeros(IxDyn(&[4 * width]));
        for k in width..2 * width {
            bias[k] = F::one();
        }
        let b = ps.register(&format!("{prefix}.b"), bias);
        LstmLayer { w, b, width }
    }

    fn step<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        x: Var<'t, F>,
        h: Var<'t, F>,
        c: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let hc = x.lstm_cell(h, c, lv.get(self.w), lv.get(self.b));
        let h_new = hc.narrow(0, 0, 1).reshape(&[self.width]);
        let c_new = hc.narrow(0, 1, 1).reshape(&[self.width]);
        (h_new, c_new)
    }
}

/// Recurrent state: hidden and cell vectors for the three modality LSTMs
/// and the shared LSTM, as plain arrays (used between inference steps and
/// as the episode-initial state).
#[derive(Debug, Clone)]
pub struct StateArrays<F: Scalar> {
    /// TD-point LSTM hidden/cell.
    pub h_td: Array1<F>,
    /// TD-point LSTM cell.
    pub c_td: Array1<F>,
    /// BU-point LSTM hidden.
    pub h_bu: Array1<F>,
    /// BU-point LSTM cell.
    pub c_bu: Array1<F>,
    /// Joint LSTM hidden.
    pub h_joint: Array1<F>,
    /// Joint LSTM cell.
    pub c_joint: Array1<F>,
    /// Shared LSTM hidden.
    pub h_shared: Array1<F>,
    /// Shared LSTM cell.
    pub c_shared: Array1<F>,
}

impl<F: Scalar> StateArrays<F> {
    /// All-zero initial state.
    pub fn zeros(dims: &HLstmDims) -> Self {
        StateArrays {
            h_td: Array1::zeros(dims.modality_width),
            c_td: Array1::zeros(dims.modality_width),
            h_bu: Array1::zeros(dims.modality_width),
            c_bu: Array1::zeros(dims.modality_width),
            h_joint: Array1::zeros(dims.modality_width),
            c_joint: Array1::zeros(dims.modality_width),
            h_shared: Array1::zeros(dims.shared_width),
            c_shared: Array1::zeros(dims.shared_width),
        }
    }
}

/// Taped recurrent state threaded through BPTT.
pub struct State<'t, F: Scalar> {
    /// TD LSTM hidden.
    pub h_td: Var<'t, F>,
    /// TD LSTM cell.
    pub c_td: Var<'t, F>,
    /// BU LSTM hidden.
    pub h_bu: Var<'t, F>,
    /// BU LSTM cell.
    pub c_bu: Var<'t, F>,
    /// Joint LSTM hidden.
    pub h_joint: Var<'t, F>,
    /// Joint LSTM cell.
    pub c_joint: Var<'t, F>,
    /// Shared LSTM hidden.
    pub h_shared: Var<'t, F>,
    /// Shared LSTM cell.
    pub c_shared: Var<'t, F>,
}

impl<'t, F: Scalar> State<'t, F> {
    /// Lift plain arrays onto a tape as constants (used at episode start and
    /// between closed-loop steps).
    pub fn from_arrays(tape: &'t Tape<F>, s: &StateArrays<F>) -> Self {
        let c = |a: &Array1<F>| tape.constant(a.clone().into_dyn());
        State {
            h_td: c(&s.h_td),
            c_td: c(&s.c_td),
            h_bu: c(&s.h_bu),
            c_bu: c(&s.c_bu),
            h_joint: c(&s.h_joint),
            c_joint: c(&s.c_joint),
            h_shared: c(&s.h_shared),
            c_shared: c(&s.c_shared),
        }
    }

    /// Snapshot the current values into plain arrays.
    pub fn to_arrays(&self) -> StateArrays<F> {
        let g = |v: Var<'t, F>| {
            v.to_array()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
        };
        StateArrays {
            h_td: g(self.h_td),
            c_td: g(self.c_td),
            h_bu: g(self.h_bu),
            c_bu: g(self.c_bu),
            h_joint: g(self.h_joint),
            c_joint: g(self.c_joint),
            h_shared: g(self.h_shared),
            c_shared: g(self.c_shared),
        }
    }
}

/// Next-step predictions read out from the modality hidden states.
pub struct Prediction<'t, F: Scalar> {
    /// Predicted TD points `[N_TD, 2]`.
    pub pt_td: Var<'t, F>,
    /// Predicted BU points `[N_BU, 2]`.
    pub pt_bu: Var<'t, F>,
    /// Predicted joint vector `[D_J]`.
    pub joint: Var<'t, F>,
}

/// The hierarchical LSTM stack.
pub struct HLstm {
    dims: HLstmDims,
    td: LstmLayer,
    bu: LstmLayer,
    joint: LstmLayer,
    shared: LstmLayer,
    proj_w: ParamId,
    proj_b: ParamId,
    read_td_w: ParamId,
    read_td_b: ParamId,
    read_bu_w: ParamId,
    read_bu_b: ParamId,
    read_joint_w: ParamId,
    read_joint_b: ParamId,
}

impl HLstm {
    /// Register all parameters under `prefix`.
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        dims: HLstmDims,
        prefix: &str,
    ) -> Self {
        let in_td = dims.n_td * 2 + dims.proj_width;
        let in_bu = dims.n_bu * 2 + dims.proj_width;
        let in_joint = dims.d_joint + dims.proj_width;
        let in_shared = 3 * dims.modality_width;
        let td = LstmLayer::new(ps, rng, in_td, dims.modality_width, &format!("{prefix}.td"));
        let bu = LstmLayer::new(ps, rng, in_bu, dims.modality_width, &format!("{prefix}.bu"));
        let joint = LstmLayer::new(
            ps,
            rng,
            in_joint,
            dims.modality_width,
            &format!("{prefix}.joint"),
        );
        let shared = LstmLayer::new(
            ps,
            rng,
            in_shared,
            dims.shared_width,
            &format!("{prefix}.shared"),
        );
        let proj_w = ps.register(
            &format!("{prefix}.proj.w"),
            xavier_uniform(
                rng,
                &[dims.proj_width, dims.shared_width],
                dims.shared_width,
                dims.proj_width,
            ),
        );
        let proj_b = ps.register(
            &format!("{prefix}.proj.b"),
            ArrayD::zeros(IxDyn(&[dims.proj_width])),
        );
        let read = |name: String, out: usize, rng: &mut R, ps: &mut ParamSet<F>| {
            (
                ps.register(
                    &format!("{name}.w"),
                    xavier_uniform(rng, &[out, dims.modality_width], dims.modality_width, out),
                ),
                ps.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out]))),
            )
        };
        let (read_td_w, read_td_b) = read(format!("{prefix}.read_td"), dims.n_td * 2, rng, ps);
        let (read_bu_w, read_bu_b) = read(format!("{prefix}.read_bu"), dims.n_bu * 2, rng, ps);
        let (read_joint_w, read_joint_b) =
            read(format!("{prefix}.read_joint"), dims.d_joint, rng, ps);
        HLstm {
            dims,
            td,
            bu,
            joint,
            shared,
            proj_w,
            proj_b,
            read_td_w,
            read_td_b,
            read_bu_w,
            read_bu_b,
            read_joint_w,
            read_joint_b,
        }
    }

    /// Layer widths.
    pub fn dims(&self) -> &HLstmDims {
        &self.dims
    }

    /// All-zero initial state on a tape.
    pub fn init_state<'t, F: Scalar>(&self, tape: &'t Tape<F>) -> State<'t, F> {
        State::from_arrays(tape, &StateArrays::zeros(&self.dims))
    }

    /// One hierarchical step.
    ///
    /// `pt_td: [N_TD, 2]`, `pt_bu: [N_BU, 2]`, `joints: [D_J]`. Returns the
    /// next-step prediction and the new state. The prediction targets step
    /// `t + 1`, so training pairs `Prediction` at `t` with observations at
    /// `t + 1`.
    pub fn step<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        pt_td: Var<'t, F>,
        pt_bu: Var<'t, F>,
        joints: Var<'t, F>,
        state: &State<'t, F>,
    ) -> (Prediction<'t, F>, State<'t, F>) {
        let tape = pt_td.tape();
        let d = &self.dims;
        assert_eq!(pt_td.shape(), vec![d.n_td, 2], "hlstm_step: pt_td shape");
        assert_eq!(pt_bu.shape(), vec![d.n_bu, 2], "hlstm_step: pt_bu shape");
        assert_eq!(joints.shape(), vec![d.d_joint], "hlstm_step: joint shape");

        let proj = state
            .h_shared
            .linear(lv.get(self.proj_w), lv.get(self.proj_b))
            .tanh();

        let x_td = concat(tape, 0, &[pt_td.reshape(&[d.n_td * 2]), proj]);
        let x_bu = concat(tape, 0, &[pt_bu.reshape(&[d.n_bu * 2]), proj]);
        let x_joint = concat(tape, 0, &[joints, proj]);

        let (h_td, c_td) = self.td.step(lv, x_td, state.h_td, state.c_td);
        let (h_bu, c_bu) = self.bu.step(lv, x_bu, state.h_bu, state.c_bu);
        let (h_joint, c_joint) = self.joint.step(lv, x_joint, state.h_joint, state.c_joint);

        let x_shared = concat(tape, 0, &[h_td, h_bu, h_joint]);
        let (h_shared, c_shared) =
            self.shared.step(lv, x_shared, state.h_shared, state.c_shared);

        let pred = Prediction {
            pt_td: h_td
                .linear(lv.get(self.read_td_w), lv.get(self.read_td_b))
                .reshape(&[d.n_td, 2]),
            pt_bu: h_bu
                .linear(lv.get(self.read_bu_w), lv.get(self.read_bu_b))
                .reshape(&[d.n_bu, 2]),
            joint: h_joint.linear(lv.get(self.read_joint_w), lv.get(self.read_joint_b)),
        };
        let state = State {
            h_td,
            c_td,
            h_bu,
            c_bu,
            h_joint,
            c_joint,
            h_shared,
            c_shared,
        };
        (pred, state)
    }

    /// Ids of the shared-state projection (exposed for the decoupling test
    /// and diagnostics).
    pub fn proj_param_ids(&self) -> (ParamId, ParamId) {
        (self.proj_w, self.proj_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dims() -> HLstmDims {
        HLstmDims {
            n_td: 2,
            n_bu: 3,
            d_joint: 4,
            modality_width: 8,
            shared_width: 6,
            proj_width: 5,
        }
    }

    fn rand_inputs<F: Scalar>(
        rng: &mut ChaCha8Rng,
        d: &HLstmDims,
    ) -> (Array2<F>, Array2<F>, Array1<F>) {
        (
            Array2::from_shape_fn((d.n_td, 2), |_| F::cast(rng.gen_range(0.0..1.0))),
            Array2::from_shape_fn((d.n_bu, 2), |_| F::cast(rng.gen_range(0.0..1.0))),
            Array1::from_shape_fn(d.d_joint, |_| F::cast(rng.gen_range(-1.0..1.0))),
        )
    }

    #[test]
    fn outputs_have_contracted_shapes() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = tiny_dims();
        let net = HLstm::new(&mut ps, &mut rng, dims, "hlstm");
        let tape = Tape::new();
        let lv = Leaves::new(&tape, &ps);
        let (a, b, j) = rand_inputs::<f64>(&mut rng, &dims);
        let s0 = net.init_state(&tape);
        let (pred, s1) = net.step(
            &lv,
            tape.constant(a.into_dyn()),
            tape.constant(b.into_dyn()),
            tape.constant(j.into_dyn()),
            &s0,
        );
        assert_eq!(pred.pt_td.shape(), vec![2, 2]);
        assert_eq!(pred.pt_bu.shape(), vec![3, 2]);
        assert_eq!(pred.joint.shape(), vec![4]);
        assert_eq!(s1.h_shared.shape(), vec![6]);
    }

    #[test]
    fn causality_step_outputs_ignore_future_inputs() {
        // Two runs share inputs at t=0 but differ at t=1; everything
        // produced at t=0 must be bit-identical.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = tiny_dims();
        let net = HLstm::new(&mut ps, &mut rng, dims, "hlstm");
        let (a0, b0, j0) = rand_inputs::<f64>(&mut rng, &dims);

        let run = |alt: f64| {
            let tape = Tape::new();
            let lv = Leaves::new(&tape, &ps);
            let s0 = net.init_state(&tape);
            let (pred0, s1) = net.step(
                &lv,
                tape.constant(a0.clone().into_dyn()),
                tape.constant(b0.clone().into_dyn()),
                tape.constant(j0.clone().into_dyn()),
                &s0,
            );
            let joint0 = pred0.joint.to_array();
            // Future input differs between runs.
            let a1 = Array2::from_elem((dims.n_td, 2), alt);
            let b1 = Array2::from_elem((dims.n_bu, 2), alt);
            let j1 = Array1::from_elem(dims.d_joint, alt);
            let (_pred1, _s2) = net.step(
                &lv,
                tape.constant(a1.into_dyn()),
                tape.constant(b1.into_dyn()),
                tape.constant(j1.into_dyn()),
                &s1,
            );
            joint0
        };
        assert_eq!(run(0.1), run(0.9));
    }

    #[test]
    fn zeroed_projection_decouples_joint_prediction_from_points() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = tiny_dims();
        let net = HLstm::new(&mut ps, &mut rng, dims, "hlstm");
        let (pw, pb) = net.proj_param_ids();
        ps.value_mut(pw).fill(0.0);
        ps.value_mut(pb).fill(0.0);

        let joints = Array1::from_shape_fn(dims.d_joint, |k| 0.1 * k as f64);
        let run = |pt_fill: f64| {
            let tape = Tape::new();
            let lv = Leaves::new(&tape, &ps);
            let mut state = net.init_state(&tape);
            let mut out = Vec::new();
            for _ in 0..3 {
                let a = Array2::from_elem((dims.n_td, 2), pt_fill);
                let b = Array2::from_elem((dims.n_bu, 2), pt_fill * 0.5);
                let (pred, s) = net.step(
                    &lv,
                    tape.constant(a.into_dyn()),
                    tape.constant(b.into_dyn()),
                    tape.constant(joints.clone().into_dyn()),
                    &state,
                );
                state = s;
                out.push(pred.joint.to_array());
            }
            out
        };
        // With the shared projection silenced, point inputs may not leak
        // into the joint stream over multiple steps.
        assert_eq!(run(0.2), run(0.8));
    }

    #[test]
    fn three_step_bptt_gradients_match_finite_differences() {
        let dims = HLstmDims {
            n_td: 2,
            n_bu: 2,
            d_joint: 2,
            modality_width: 4,
            shared_width: 3,
            proj_width: 2,
        };
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = HLstm::new(&mut ps, &mut rng, dims, "hlstm");
        let mut inputs = Vec::new();
        for _ in 0..3 {
            inputs.push(rand_inputs::<f64>(&mut rng, &dims));
        }
        let build = fd::objective(move |tape: &Tape<f64>, ps: &ParamSet<f64>| {
            let lv = Leaves::new(tape, ps);
            let mut state = net.init_state(tape);
            let mut acc: Option<crate::tensor::Var<'_, f64>> = None;
            for (a, b, j) in &inputs {
                let (pred, s) = net.step(
                    &lv,
                    tape.constant(a.clone().into_dyn()),
                    tape.constant(b.clone().into_dyn()),
                    tape.constant(j.clone().into_dyn()),
                    &state,
                );
                state = s;
                let term = pred
                    .pt_td
                    .sqr()
                    .sum_all()
                    .add(pred.pt_bu.sqr().sum_all())
                    .add(pred.joint.sqr().sum_all());
                acc = Some(match acc {
                    Some(x) => x.add(term),
                    None => term,
                });
            }
            acc.unwrap()
        });
        let max_rel = fd::max_param_rel_error(build, &mut ps, 1e-4, 24, 5);
        assert!(max_rel < 1e-6, "hlstm bptt rel error {max_rel}");
    }

    #[test]
    fn step_is_deterministic_for_fixed_seed() {
        let run = || {
            let mut ps: ParamSet<f64> = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let dims = tiny_dims();
            let net = HLstm::new(&mut ps, &mut rng, dims, "hlstm");
            let (a, b, j) = rand_inputs::<f64>(&mut rng, &dims);
            let tape = Tape::new();
            let lv = Leaves::new(&tape, &ps);
            let s0 = net.init_state(&tape);
            let (pred, _) = net.step(
                &lv,
                tape.constant(a.into_dyn()),
                tape.constant(b.into_dyn()),
                tape.constant(j.into_dyn()),
                &s0,
            );
            pred.joint.to_array()
        };
        assert_eq!(run(), run());
    }
}
