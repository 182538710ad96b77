//! Planar 3-link arm: forward and inverse kinematics in pixel coordinates.
//!
//! The arm lives in the image plane: the base is a fixed pixel, angles are
//! measured from the +x axis (y grows downward, so positive angles turn
//! clockwise on screen). Inverse kinematics fixes the redundancy by
//! choosing the tool angle and a constant elbow side, making the joint
//! trajectory a deterministic function of the end-effector path.

use crate::{Error, Result};

/// Joint angles are stored normalized; this maps `[-PI, PI)` to `[0, 1)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let wrapped = (theta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI);
    wrapped / (2.0 * std::f64::consts::PI)
}

/// Inverse of [`normalize_angle`].
pub fn denormalize_angle(u: f64) -> f64 {
    u * 2.0 * std::f64::consts::PI - std::f64::consts::PI
}

/// Link lengths and base position, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArmGeometry {
    /// Base pixel `[x, y]`.
    pub base: [f64; 2],
    /// Link lengths from base to end effector.
    pub lengths: [f64; 3],
}

/// Joint positions from base to end effector: `[base, elbow, wrist, ee]`.
pub fn forward_kinematics(geo: &ArmGeometry, angles: [f64; 3]) -> [[f64; 2]; 4] {
    let mut pts = [[0.0; 2]; 4];
    pts[0] = geo.base;
    let mut heading = 0.0;
    for k in 0..3 {
        heading += angles[k];
        pts[k + 1] = [
            pts[k][0] + geo.lengths[k] * heading.cos(),
            pts[k][1] + geo.lengths[k] * heading.sin(),
        ];
    }
    pts
}

/// Solve for joint angles placing the end effector at `target` with the
/// tool (third link) pointing along `tool_angle`. The elbow always bends to
/// the same side, so solutions vary continuously along a continuous path.
pub fn inverse_kinematics(
    geo: &ArmGeometry,
    target: [f64; 2],
    tool_angle: f64,
) -> Result<[f64; 3]> {
    let (l1, l2, l3) = (geo.lengths[0], geo.lengths[1], geo.lengths[2]);
    let wrist = [
        target[0] - l3 * tool_angle.cos(),
        target[1] - l3 * tool_angle.sin(),
    ];
    let dx = wrist[0] - geo.base[0];
    let dy = wrist[1] - geo.base[1];
    let r = (dx * dx + dy * dy).sqrt();
    if r > l1 + l2 + 1e-9 || r < (l1 - l2).abs() - 1e-9 {
        return Err(Error::Config(format!(
            "target ({:.1}, {:.1}) out of reach: wrist distance {r:.2} outside [{:.2}, {:.2}]",
            target[0],
            target[1],
            (l1 - l2).abs(),
            l1 + l2
        )));
    }
    let cos_q2 = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    // Elbow side fixed: negative interior angle keeps the elbow on the
    // counter-clockwise side of the base-to-wrist line for every target.
    let q2 = -cos_q2.acos();
    let theta1 = dy.atan2(dx) - (l2 * q2.sin()).atan2(l1 + l2 * cos_q2);
    let theta3 = tool_angle - theta1 - q2;
    Ok([theta1, q2, theta3])
}
