//! Deterministic rasterizer for the tabletop scene.
//!
//! Layers, back to front: wood-textured table, textured box sprite, arm
//! links with joint discs, gripper prongs. No anti-aliasing and no
//! transcendental math in the pixel loops, so a frame is a pure function of
//! its inputs down to the last bit. Coordinates are pixel indices; `y` grows
//! downward.

use ndarray::Array3;

use super::arm::{forward_kinematics, ArmGeometry};

/// Gripper prong color, used both for drawing and for locating the gripper
/// in rendered frames (it appears nowhere else in the palette).
pub const GRIPPER_COLOR: [u8; 3] = [26, 128, 179];

/// Base color of the box sprite (a high-contrast wood orange).
pub const BOX_COLOR: [u8; 3] = [212, 140, 52];

fn put(img: &mut Array3<u8>, x: i64, y: i64, color: [u8; 3]) {
    let (_, h, w) = img.dim();
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        return;
    }
    for c in 0..3 {
        img[[c, y as usize, x as usize]] = color[c];
    }
}

/// Distance from point `p` to segment `ab`.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn draw_segment(img: &mut Array3<u8>, a: [f64; 2], b: [f64; 2], width: f64, color: [u8; 3]) {
    let pad = width / 2.0 + 1.0;
    let x0 = (a[0].min(b[0]) - pad).floor() as i64;
    let x1 = (a[0].max(b[0]) + pad).ceil() as i64;
    let y0 = (a[1].min(b[1]) - pad).floor() as i64;
    let y1 = (a[1].max(b[1]) + pad).ceil() as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if segment_distance([x as f64, y as f64], a, b) <= width / 2.0 {
                put(img, x, y, color);
            }
        }
    }
}

fn draw_disc(img: &mut Array3<u8>, center: [f64; 2], radius: f64, color: [u8; 3]) {
    let x0 = (center[0] - radius).floor() as i64;
    let x1 = (center[0] + radius).ceil() as i64;
    let y0 = (center[1] - radius).floor() as i64;
    let y1 = (center[1] + radius).ceil() as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2);
            if d2 <= radius * radius {
                put(img, x, y, color);
            }
        }
    }
}

/// Table background: low-contrast wood bands plus integer-hash grain, so
/// bottom-up saliency has little to grab away from the box and arm.
pub fn render_background(size: usize) -> Array3<u8> {
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let stripe: i32 = if (y / 4) % 2 == 0 { 6 } else { -6 };
            let h = (x as u32)
                .wrapping_mul(2654435761)
                .wrapping_add((y as u32).wrapping_mul(40503));
            let noise = ((h >> 28) as i32) - 8; // [-8, 8)
            let base = [140i32, 107, 77];
            for c in 0..3 {
                img[[c, y, x]] = (base[c] + stripe + noise / 2).clamp(0, 255) as u8;
            }
        }
    }
    img
}

fn draw_box(img: &mut Array3<u8>, center: [f64; 2], size: usize) {
    let half = size as i64 / 2;
    let cx = center[0].round() as i64;
    let cy = center[1].round() as i64;
    for dy in -half..=half {
        for dx in -half..=half {
            let border = dx.abs() == half || dy.abs() == half;
            let color = if border {
                [90, 60, 30]
            } else {
                // Checker texture keeps spatial-gradient saliency high
                // inside the sprite, not just at its edges.
                let dark = ((dx + dy).rem_euclid(2)) == 0;
                let d: i32 = if dark { 36 } else { 0 };
                [
                    (BOX_COLOR[0] as i32 - d) as u8,
                    (BOX_COLOR[1] as i32 - d) as u8,
                    (BOX_COLOR[2] as i32 - d) as u8,
                ]
            };
            put(img, cx + dx, cy + dy, color);
        }
    }
}

/// What to draw on top of the background.
#[derive(Debug, Clone, Copy)]
pub struct Scene {
    /// Joint angles (radians, denormalized).
    pub angles: [f64; 3],
    /// Gripper opening in `[0, 1]` (1 = fully open).
    pub gripper: f64,
    /// Box sprite center, pixels.
    pub box_center: [f64; 2],
    /// Box sprite side length, pixels.
    pub box_size: usize,
    /// Skip the arm + gripper layers (background/box only).
    pub draw_arm: bool,
}

/// Render one frame as `[3, size, size]` u8.
pub fn render_frame(geo: &ArmGeometry, scene: &Scene, size: usize) -> Array3<u8> {
    let mut img = render_background(size);
    draw_box(&mut img, scene.box_center, scene.box_size);
    if !scene.draw_arm {
        return img;
    }
    let pts = forward_kinematics(geo, scene.angles);
    let widths = [3.0, 3.0, 2.0];
    let colors = [[64u8, 64, 71], [84, 84, 92], [107, 107, 115]];
    for k in 0..3 {
        draw_segment(&mut img, pts[k], pts[k + 1], widths[k], colors[k]);
    }
    draw_disc(&mut img, pts[1], 2.0, [38, 38, 43]);
    draw_disc(&mut img, pts[2], 2.0, [38, 38, 43]);

    // Gripper: two prongs symmetric about the end effector, so the prong
    // centroid coincides with the kinematic end-effector position.
    let heading: f64 = scene.angles.iter().sum();
    let u = [heading.cos(), heading.sin()];
    let v = [-heading.sin(), heading.cos()];
    let sep = 1.5 + 2.5 * scene.gripper.clamp(0.0, 1.0);
    let ee = pts[3];
    for side in [-1.0, 1.0] {
        let off = [side * sep * v[0], side * sep * v[1]];
        let a = [ee[0] - 2.0 * u[0] + off[0], ee[1] - 2.0 * u[1] + off[1]];
        let b = [ee[0] + 2.0 * u[0] + off[0], ee[1] + 2.0 * u[1] + off[1]];
        draw_segment(&mut img, a, b, 1.4, GRIPPER_COLOR);
    }
    img
}

/// Centroid of gripper-colored pixels, if any (test/diagnostic helper).
pub fn gripper_centroid(img: &Array3<u8>) -> Option<[f64; 2]> {
    let (_, h, w) = img.dim();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if (0..3).all(|c| img[[c, y, x]] == GRIPPER_COLOR[c]) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| [sx / n as f64, sy / n as f64])
}
