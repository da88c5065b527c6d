use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, RfSimError};
use crate::rng::stream_rng;

pub const N_JOINTS: usize = 17;

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

const BONES: [(usize, usize); 16] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (11, 12),
    (12, 13),
    (8, 14),
    (14, 15),
    (15, 16),
];

/// Parent/child joint index pairs of the kinematic tree.
pub fn bone_pairs() -> &'static [(usize, usize)] {
    &BONES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    LeftArmStretch,
    RightArmStretch,
    BothArmsStretch,
    LeftLateralRaise,
    RightLateralRaise,
    LeftForwardLunge,
    RightForwardLunge,
    LeftSideLunge,
    RightSideLunge,
    Jump,
    PickUp,
    ClockwiseSpin,
    CounterclockwiseSpin,
    JumpingJack,
    Squat,
    LeftRotation,
    RightRotation,
    DirectionalHops,
}

impl Action {
    pub const ALL: [Action; 18] = [
        Action::LeftArmStretch,
        Action::RightArmStretch,
        Action::BothArmsStretch,
        Action::LeftLateralRaise,
        Action::RightLateralRaise,
        Action::LeftForwardLunge,
        Action::RightForwardLunge,
        Action::LeftSideLunge,
        Action::RightSideLunge,
        Action::Jump,
        Action::PickUp,
        Action::ClockwiseSpin,
        Action::CounterclockwiseSpin,
        Action::JumpingJack,
        Action::Squat,
        Action::LeftRotation,
        Action::RightRotation,
        Action::DirectionalHops,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::LeftArmStretch => "left_arm_stretch",
            Action::RightArmStretch => "right_arm_stretch",
            Action::BothArmsStretch => "both_arms_stretch",
            Action::LeftLateralRaise => "left_lateral_raise",
            Action::RightLateralRaise => "right_lateral_raise",
            Action::LeftForwardLunge => "left_forward_lunge",
            Action::RightForwardLunge => "right_forward_lunge",
            Action::LeftSideLunge => "left_side_lunge",
            Action::RightSideLunge => "right_side_lunge",
            Action::Jump => "jump",
            Action::PickUp => "pick_up",
            Action::ClockwiseSpin => "clockwise_spin",
            Action::CounterclockwiseSpin => "counterclockwise_spin",
            Action::JumpingJack => "jumping_jack",
            Action::Squat => "squat",
            Action::LeftRotation => "left_rotation",
            Action::RightRotation => "right_rotation",
            Action::DirectionalHops => "directional_hops",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap_or(0)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = RfSimError;

    /// Accepts the snake_case name with `-` or spaces as separators, any case.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .map(|c| if c == '-' || c == ' ' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        let key = match key.as_str() {
            "pickup" => "pick_up",
            "both_arm_stretch" => "both_arms_stretch",
            other => other,
        }
        .to_string();
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == key)
            .ok_or_else(|| RfSimError::UnknownAction(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTrajectory {
    /// `frames[t][j]` is joint `j` at frame `t`, world metres.
    pub frames: Vec<Vec<Vector3<f64>>>,
    pub frame_rate: f64,
    pub action: Action,
}

impl SkeletonTrajectory {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_joints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.frame_rate
    }

    /// Joints linearly interpolated at fractional frame position `u`
    /// (clamped to the trajectory).
    pub fn interpolate(&self, u: f64) -> Vec<Vector3<f64>> {
        let last = self.frames.len() - 1;
        let u = u.clamp(0.0, last as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(last);
        let w = u - i0 as f64;
        if w == 0.0 || i0 == i1 {
            return self.frames[i0].clone();
        }
        self.frames[i0]
            .iter()
            .zip(&self.frames[i1])
            .map(|(a, b)| a * (1.0 - w) + b * w)
            .collect()
    }

    /// Sub-trajectory of frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> SkeletonTrajectory {
        SkeletonTrajectory {
            frames: self.frames[start..start + len].to_vec(),
            frame_rate: self.frame_rate,
            action: self.action,
        }
    }
}

/// Joint angles (radians) and root placement in the body frame
/// (x forward, y left, z up).
#[derive(Debug, Clone, Copy, Default)]
struct Pose {
    root: Vector3<f64>,
    yaw: f64,
    trunk_bend: f64,
    trunk_twist: f64,
    hip_flex: [f64; 2],
    hip_abd: [f64; 2],
    knee: [f64; 2],
    shoulder_flex: [f64; 2],
    shoulder_abd: [f64; 2],
    elbow: [f64; 2],
    lift: f64,
}

#[derive(Debug, Clone, Copy)]
struct Body {
    hip_half_width: f64,
    thigh: f64,
    shin: f64,
    ankle_height: f64,
    spine: f64,
    thorax: f64,
    neck: f64,
    head: f64,
    shoulder_half_width: f64,
    upper_arm: f64,
    forearm: f64,
}

impl Body {
    fn scaled(s: f64) -> Self {
        Self {
            hip_half_width: 0.12 * s,
            thigh: 0.45 * s,
            shin: 0.43 * s,
            ankle_height: 0.07 * s,
            spine: 0.22 * s,
            thorax: 0.25 * s,
            neck: 0.08 * s,
            head: 0.15 * s,
            shoulder_half_width: 0.18 * s,
            upper_arm: 0.28 * s,
            forearm: 0.25 * s,
        }
    }
}

fn rx(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn ry(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn rz(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

/// Forward kinematics. Side index 0 is right (−y), 1 is left (+y).
fn forward_kinematics(body: &Body, pose: &Pose) -> Vec<Vector3<f64>> {
    let down = Vector3::new(0.0, 0.0, -1.0);
    let up = Vector3::new(0.0, 0.0, 1.0);
    let root = rz(pose.yaw);
    let side_sign = [-1.0, 1.0];

    let thigh_rot = |s: usize| root * ry(-pose.hip_flex[s]) * rx(side_sign[s] * pose.hip_abd[s]);
    let leg = |s: usize| {
        let hip_off = root * Vector3::new(0.0, side_sign[s] * body.hip_half_width, 0.0);
        let t = thigh_rot(s);
        let knee_off = t * (down * body.thigh);
        let ankle_off = t * ry(pose.knee[s]) * (down * body.shin);
        (hip_off, hip_off + knee_off, hip_off + knee_off + ankle_off)
    };
    let legs = [leg(0), leg(1)];
    // Lowest ankle rests at ankle height unless lifted.
    let lowest = legs[0].2.z.min(legs[1].2.z);
    let pelvis = Vector3::new(pose.root.x, pose.root.y, body.ankle_height - lowest + pose.lift);

    let trunk = root * rz(pose.trunk_twist) * ry(pose.trunk_bend);
    let spine = pelvis + trunk * (up * body.spine);
    let thorax = spine + trunk * (up * body.thorax);
    let neck = thorax + trunk * (up * body.neck);
    let head = neck + trunk * (up * body.head);
    let arm = |s: usize| {
        let shoulder = thorax + trunk * Vector3::new(0.0, side_sign[s] * body.shoulder_half_width, 0.0);
        let upper = trunk * ry(-pose.shoulder_flex[s]) * rx(side_sign[s] * pose.shoulder_abd[s]);
        let elbow = shoulder + upper * (down * body.upper_arm);
        let wrist = elbow + upper * ry(-pose.elbow[s]) * (down * body.forearm);
        (shoulder, elbow, wrist)
    };
    let (rs, re, rw) = arm(0);
    let (ls, le, lw) = arm(1);
    let (rh, rk, ra) = legs[0];
    let (lh, lk, la) = legs[1];
    vec![
        pelvis,
        pelvis + rh,
        pelvis + rk,
        pelvis + ra,
        pelvis + lh,
        pelvis + lk,
        pelvis + la,
        spine,
        thorax,
        neck,
        head,
        ls,
        le,
        lw,
        rs,
        re,
        rw,
    ]
}

fn deg(d: f64) -> f64 {
    d * PI / 180.0
}

/// Smooth 0→1→0 excursion over one cycle.
fn bump(u: f64) -> f64 {
    0.5 * (1.0 - u.cos())
}

fn pose_at(action: Action, u: f64, amp: f64) -> Pose {
    let s = bump(u) * amp;
    let mut p = Pose {
        elbow: [deg(10.0); 2],
        ..Pose::default()
    };
    const R: usize = 0;
    const L: usize = 1;
    match action {
        Action::LeftArmStretch => {
            p.shoulder_flex[L] = deg(170.0) * s;
            p.elbow[L] = deg(10.0) + deg(30.0) * (1.0 - s);
        }
        Action::RightArmStretch => {
            p.shoulder_flex[R] = deg(170.0) * s;
            p.elbow[R] = deg(10.0) + deg(30.0) * (1.0 - s);
        }
        Action::BothArmsStretch => {
            p.shoulder_flex = [deg(170.0) * s; 2];
        }
        Action::LeftLateralRaise => p.shoulder_abd[L] = deg(95.0) * s,
        Action::RightLateralRaise => p.shoulder_abd[R] = deg(95.0) * s,
        Action::LeftForwardLunge | Action::RightForwardLunge => {
            let (f, b) = if action == Action::LeftForwardLunge { (L, R) } else { (R, L) };
            p.hip_flex[f] = deg(65.0) * s;
            p.knee[f] = deg(75.0) * s;
            p.hip_flex[b] = -deg(25.0) * s;
            p.knee[b] = deg(45.0) * s;
            p.root.x = 0.3 * s;
            p.shoulder_flex = [deg(20.0) * s; 2];
        }
        Action::LeftSideLunge | Action::RightSideLunge => {
            let (f, sign) = if action == Action::LeftSideLunge { (L, 1.0) } else { (R, -1.0) };
            p.hip_abd[f] = deg(30.0) * s;
            p.hip_flex[f] = deg(40.0) * s;
            p.knee[f] = deg(70.0) * s;
            p.root.y = sign * 0.3 * s;
            p.trunk_bend = deg(15.0) * s;
        }
        Action::Jump => {
            let crouch = (-u.sin()).max(0.0) * amp;
            let air = u.sin().max(0.0) * amp;
            p.hip_flex = [deg(40.0) * crouch; 2];
            p.knee = [deg(70.0) * crouch; 2];
            p.trunk_bend = deg(20.0) * crouch;
            p.lift = 0.25 * air;
            p.shoulder_flex = [deg(150.0) * air - deg(30.0) * crouch; 2];
        }
        Action::PickUp => {
            p.trunk_bend = deg(75.0) * s;
            p.hip_flex = [deg(30.0) * s; 2];
            p.knee = [deg(50.0) * s; 2];
            p.shoulder_flex = [deg(75.0) * s; 2];
        }
        Action::ClockwiseSpin | Action::CounterclockwiseSpin => {
            let dir = if action == Action::ClockwiseSpin { -1.0 } else { 1.0 };
            p.yaw = dir * u;
            p.shoulder_abd = [deg(35.0) * amp; 2];
            let step = (2.0 * u).sin().max(0.0) * amp;
            p.hip_flex[R] = deg(25.0) * step;
            p.knee[R] = deg(35.0) * step;
        }
        Action::JumpingJack => {
            p.shoulder_abd = [deg(165.0) * s; 2];
            p.hip_abd = [deg(18.0) * s; 2];
            p.lift = 0.08 * (2.0 * u).sin().abs() * amp;
        }
        Action::Squat => {
            p.hip_flex = [deg(95.0) * s; 2];
            p.knee = [deg(115.0) * s; 2];
            p.trunk_bend = deg(25.0) * s;
            p.shoulder_flex = [deg(85.0) * s; 2];
        }
        Action::LeftRotation => {
            p.trunk_twist = deg(60.0) * s;
            p.shoulder_abd = [deg(40.0) * s; 2];
        }
        Action::RightRotation => {
            p.trunk_twist = -deg(60.0) * s;
            p.shoulder_abd = [deg(40.0) * s; 2];
        }
        Action::DirectionalHops => {
            // Four hops per cycle: forward, back, left, right.
            let q = (u / TAU).rem_euclid(1.0) * 4.0;
            let k = q.floor() as usize % 4;
            let h = (PI * q.fract()).sin() * amp;
            let dir = [
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(-1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, -1.0, 0.0),
            ][k];
            p.root = dir * 0.25 * h;
            p.lift = 0.12 * h;
            p.knee = [deg(30.0) * h; 2];
            p.hip_flex = [deg(20.0) * h; 2];
        }
    }
    p
}

/// Parametric periodic motion for `action`, rigidly placed at `base_position`
/// (pelvis ground projection) and rotated by `orientation` about the vertical.
///
/// The seed controls body scale, cycle period, phase and amplitude.
pub fn generate_motion(
    action: Action,
    duration: f64,
    frame_rate: f64,
    base_position: Vector3<f64>,
    orientation: f64,
    seed: u64,
) -> Result<SkeletonTrajectory> {
    if !(frame_rate > 0.0) || !frame_rate.is_finite() {
        return Err(RfSimError::InvalidParameter(format!(
            "frame rate must be positive, got {frame_rate}"
        )));
    }
    let n_frames = if duration > 0.0 && duration.is_finite() {
        (duration * frame_rate).round() as usize
    } else {
        0
    };
    if n_frames == 0 {
        return Err(RfSimError::EmptyTrajectory {
            duration,
            frame_rate,
        });
    }
    let mut rng = stream_rng(seed, &[0xb0d1, action.index() as u64]);
    let body = Body::scaled(rng.random_range(0.95..1.05));
    let period = rng.random_range(1.6..2.4);
    let phase0 = rng.random_range(0.0..TAU);
    let amp = rng.random_range(0.85..1.0);
    let place = rz(orientation);
    let frames = (0..n_frames)
        .map(|i| {
            let t = i as f64 / frame_rate;
            let u = TAU * t / period + phase0;
            forward_kinematics(&body, &pose_at(action, u, amp))
                .into_iter()
                .map(|j| base_position + place * j)
                .collect()
        })
        .collect();
    Ok(SkeletonTrajectory {
        frames,
        frame_rate,
        action,
    })
}
