//! Canonical 50-joint skeleton: 8 upper-body joints followed by 21 joints
//! per hand, each joint stored as (x, y, z). The y axis points down.

pub const JOINTS: usize = 50;
pub const BODY_JOINTS: usize = 8;
pub const HAND_JOINTS: usize = 21;
pub const RIGHT_HAND: usize = BODY_JOINTS;
pub const LEFT_HAND: usize = BODY_JOINTS + HAND_JOINTS;

pub const R_ELBOW: usize = 3;
pub const R_WRIST: usize = 4;
pub const L_ELBOW: usize = 6;
pub const L_WRIST: usize = 7;

const BODY: [[f64; 3]; BODY_JOINTS] = [
    [0.0, -0.45, 0.0],  // nose
    [0.0, -0.2, 0.0],   // neck
    [-0.3, -0.15, 0.0], // right shoulder
    [-0.42, 0.2, 0.05], // right elbow
    [-0.25, 0.4, 0.15], // right wrist
    [0.3, -0.15, 0.0],  // left shoulder
    [0.42, 0.2, 0.05],  // left elbow
    [0.25, 0.4, 0.15],  // left wrist
];

const BODY_BONES: [(usize, usize); 7] = [(0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7)];

/// Rest pose, joint-major.
pub fn rest_pose() -> Vec<[f64; 3]> {
    let mut joints: Vec<[f64; 3]> = BODY.to_vec();
    for (wrist, side) in [(R_WRIST, -1.0), (L_WRIST, 1.0)] {
        let w = BODY[wrist];
        joints.push(w);
        for finger in 0..5 {
            let angle = (-0.6 + 0.3 * finger as f64) * side;
            let (dx, dy) = (angle.sin() * side, angle.cos());
            for seg in 1..=4 {
                let r = 0.03 * seg as f64;
                joints.push([w[0] + r * dx * 0.6 + side * 0.01, w[1] + r * dy, w[2]]);
            }
        }
    }
    joints
}

/// Bones as joint index pairs.
pub fn bones() -> Vec<(usize, usize)> {
    let mut out = BODY_BONES.to_vec();
    for (hand, wrist) in [(RIGHT_HAND, R_WRIST), (LEFT_HAND, L_WRIST)] {
        out.push((wrist, hand));
        for finger in 0..5 {
            let base = hand + 1 + 4 * finger;
            out.push((hand, base));
            for seg in 0..3 {
                out.push((base + seg, base + seg + 1));
            }
        }
    }
    out
}
