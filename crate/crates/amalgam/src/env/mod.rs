//! Synthetic desk-scale pick task.
//!
//! A scripted planar 3-link arm picks a textured box from one of three
//! fixed slots on a tabletop, rendered top-down-oblique at 64x64. Each
//! episode is 120 steps of reach, descend, grasp and lift, with a small
//! seeded jitter on the start pose; everything else is a pure function of
//! `(slot, seed, config)`. The task keeps what matters for visuomotor
//! attention — a salient object, a moving arm, phase structure — and drops
//! physics.

pub mod arm;
pub mod dataset;
pub mod render;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};
use arm::{denormalize_angle, forward_kinematics, inverse_kinematics, normalize_angle, ArmGeometry};
use render::{render_frame, Scene};

/// Width of the joint vector: three arm joints plus the gripper scalar.
pub const D_JOINT: usize = 4;

/// Scene and trajectory parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Square frame side, pixels.
    pub image: usize,
    /// Steps per episode.
    pub steps: usize,
    /// Box slot centers, pixels.
    pub slots: [[f64; 2]; 3],
    /// Box sprite side, pixels.
    pub box_size: usize,
    /// Arm geometry.
    pub arm: ArmGeometry,
    /// Reach target offset below the box (approach point), pixels.
    pub hover_offset: f64,
    /// Lift height, pixels.
    pub lift_px: f64,
    /// Uniform start-pose jitter, pixels.
    pub start_jitter_px: f64,
    /// Attention-success radius around the box center, pixels.
    pub attention_radius_px: f64,
    /// End-effector tolerance for pick success, pixels.
    pub ee_tolerance_px: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            image: 64,
            steps: 120,
            slots: [[16.0, 20.0], [32.0, 20.0], [48.0, 20.0]],
            box_size: 9,
            arm: ArmGeometry {
                base: [32.0, 60.0],
                lengths: [24.0, 18.0, 10.0],
            },
            hover_offset: 8.0,
            lift_px: 6.0,
            start_jitter_px: 2.0,
            attention_radius_px: 6.0,
            ee_tolerance_px: 2.0,
        }
    }
}

impl EnvConfig {
    /// End of the reach phase (exclusive step index).
    pub fn reach_end(&self) -> usize {
        self.steps * 5 / 12
    }
    /// End of the descend phase.
    pub fn descend_end(&self) -> usize {
        self.steps * 7 / 12
    }
    /// End of the grasp phase; the gripper is fully closed one step before.
    pub fn grasp_end(&self) -> usize {
        self.steps * 2 / 3
    }
    /// Step at which the grasp is complete (gripper closed, EE on the box).
    pub fn grasp_step(&self) -> usize {
        self.grasp_end() - 1
    }
    /// Sanity checks on the geometry.
    pub fn validate(&self) -> Result<()> {
        if self.image < 16 || self.steps < 12 {
            return Err(Error::Config(format!(
                "scene too small: image {} steps {}",
                self.image, self.steps
            )));
        }
        for (i, a) in self.slots.iter().enumerate() {
            for b in self.slots.iter().skip(i + 1) {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                if d < 10.0 {
                    return Err(Error::Config(format!(
                        "slots {a:?} and {b:?} are only {d:.1} px apart (need >= 10)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One recorded demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Frames `[T, 3, H, W]`, 8-bit.
    pub frames: Array4<u8>,
    /// Normalized joints `[T, 4]` in `[0, 1]` (three angles + gripper).
    pub joints: Array2<f32>,
    /// Which slot held the box.
    pub box_slot: usize,
    /// Box center before the lift, pixels.
    pub box_center_px: [f64; 2],
    /// Jitter seed this episode was generated with.
    pub seed: u64,
}

fn ease(p: f64) -> f64 {
    0.5 - 0.5 * (std::f64::consts::PI * p.clamp(0.0, 1.0)).cos()
}

fn lerp(a: [f64; 2], b: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s]
}

/// End-effector pose and gripper opening at step `t` of the script.
fn scripted_pose(
    cfg: &EnvConfig,
    start: [f64; 2],
    box_center: [f64; 2],
    t: usize,
) -> ([f64; 2], f64, f64) {
    let hover = [box_center[0], box_center[1] + cfg.hover_offset];
    let (reach, descend, grasp) = (cfg.reach_end(), cfg.descend_end(), cfg.grasp_end());
    // Progress through phase `[t0, t1)`, reaching 1.0 at the phase's last
    // step. A one-step phase completes immediately (p = 1), so e.g. the
    // gripper is still fully closed at `grasp_step` in short episodes.
    let phase_p = |t0: usize, t1: usize| {
        let span = t1 - 1 - t0;
        if span == 0 {
            1.0
        } else {
            (t - t0) as f64 / span as f64
        }
    };
    if t < reach {
        (lerp(start, hover, ease(phase_p(0, reach))), 1.0, 0.0)
    } else if t < descend {
        (
            lerp(hover, box_center, ease(phase_p(reach, descend))),
            1.0,
            0.0,
        )
    } else if t < grasp {
        (box_center, 1.0 - ease(phase_p(descend, grasp)), 0.0)
    } else {
        let p = ease(phase_p(grasp, cfg.steps));
        let lift = cfg.lift_px * p;
        ([box_center[0], box_center[1] - lift], 0.0, lift)
    }
}

/// Generate one scripted demonstration. Bit-identical for equal
/// `(slot, seed, config)`.
pub fn generate_episode(cfg: &EnvConfig, slot: usize, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    if slot >= cfg.slots.len() {
        return Err(Error::Config(format!("invalid slot {slot}")));
    }
    let box_center = cfg.slots[slot];
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (slot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let j = cfg.start_jitter_px;
    let start = [
        cfg.arm.base[0] + rng.gen_range(-j..=j),
        cfg.arm.base[1] - 30.0 + rng.gen_range(-j..=j),
    ];

    let mut frames = Array4::zeros((cfg.steps, 3, cfg.image, cfg.image));
    let mut joints = Array2::zeros((cfg.steps, D_JOINT));
    for t in 0..cfg.steps {
        let (ee, grip, lift) = scripted_pose(cfg, start, box_center, t);
        let tool = (ee[1] - cfg.arm.base[1]).atan2(ee[0] - cfg.arm.base[0]);
        let angles = inverse_kinematics(&cfg.arm, ee, tool)?;
        for k in 0..3 {
            joints[[t, k]] = normalize_angle(angles[k]) as f32;
        }
        joints[[t, 3]] = grip as f32;
        // Once grasped, the box rides with the end effector.
        let box_draw = if t >= cfg.grasp_step() {
            [box_center[0], box_center[1] - lift]
        } else {
            box_center
        };
        let frame = render_frame(
            &cfg.arm,
            &Scene {
                angles,
                gripper: grip,
                box_center: box_draw,
                box_size: cfg.box_size,
                draw_arm: true,
            },
            cfg.image,
        );
        frames.index_axis_mut(ndarray::Axis(0), t).assign(&frame);
    }
    Ok(Episode {
        frames,
        joints,
        box_slot: slot,
        box_center_px: box_center,
        seed,
    })
}

/// End-effector pixel position from a stored (normalized) joint row.
pub fn end_effector(cfg: &EnvConfig, joints_row: &[f32]) -> [f64; 2] {
    let angles = [
        denormalize_angle(joints_row[0] as f64),
        denormalize_angle(joints_row[1] as f64),
        denormalize_angle(joints_row[2] as f64),
    ];
    forward_kinematics(&cfg.arm, angles)[3]
}

/// Outcome flags for one evaluated rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessFlags {
    /// Some TD point stayed within the attention radius of the box center
    /// for the entire second half of the pre-grasp window.
    pub attention_success: bool,
    /// End effector reached the box with the gripper closed and lifted.
    pub pick_success: bool,
}

/// Evaluate a rollout: `joints [T, 4]` normalized, `pt_td [T, N_TD, 2]` in
/// `[0, 1]^2`. Both must cover at least `grasp_step + 1` steps.
pub fn success_metric(
    cfg: &EnvConfig,
    joints: &Array2<f32>,
    box_center_px: [f64; 2],
    pt_td: &Array3<f64>,
) -> SuccessFlags {
    let grasp = cfg.grasp_step();
    assert!(
        joints.nrows() > grasp && pt_td.dim().0 > grasp,
        "rollout shorter than the grasp step"
    );

    // Attention: a single point must hold the box for the final 50% of the
    // pre-grasp steps, not merely pass through.
    let window_start = grasp.div_ceil(2);
    let n_td = pt_td.dim().1;
    let img = cfg.image as f64;
    let r = cfg.attention_radius_px;
    let attention_success = (0..n_td).any(|k| {
        (window_start..grasp).all(|t| {
            // Pixel-center convention: point p covers pixel index p*img - 0.5.
            let px = pt_td[[t, k, 0]] * img - 0.5;
            let py = pt_td[[t, k, 1]] * img - 0.5;
            let d = ((px - box_center_px[0]).powi(2) + (py - box_center_px[1]).powi(2)).sqrt();
            d <= r
        })
    });

    let ee_grasp = end_effector(cfg, joints.row(grasp).as_slice().unwrap());
    let reach_ok = {
        let d = ((ee_grasp[0] - box_center_px[0]).powi(2)
            + (ee_grasp[1] - box_center_px[1]).powi(2))
        .sqrt();
        d <= cfg.ee_tolerance_px
    };
    let closed = joints[[grasp, 3]] <= 0.5;
    let ee_final = end_effector(cfg, joints.row(joints.nrows() - 1).as_slice().unwrap());
    let lifted = (ee_grasp[1] - ee_final[1]) >= cfg.lift_px * 2.0 / 3.0;
    SuccessFlags {
        attention_success,
        pick_success: reach_ok && closed && lifted,
    }
}
