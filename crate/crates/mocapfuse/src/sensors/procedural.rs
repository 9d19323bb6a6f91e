//! Procedural ground-truth motions at desk scale.
//!
//! Every generator builds joint-space trajectories first and then derives the
//! root translation by pinning the supporting foot to the world: the root
//! moves so the stance foot stays exactly where it touched down. This makes
//! ground contacts, foot heights and root velocities mutually consistent by
//! construction, which the contact labels and the translation filter rely on.
//!
//! The subject stands on the floor plane y=0 in front of the camera
//! (z roughly 2.5 to 4.5 m) and faces local +Z.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MotionClip;
use crate::geom::{Rotation, Vec3};
use crate::skeleton::{fk, joints, KinematicTree, Pose, JOINT_COUNT};

pub const FRAME_RATE: f64 = 30.0;

/// Shoulder roll that brings the T-pose arms down to the sides.
const ARM_DOWN: f64 = 75.0 * PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Walk,
    Idle,
    Squat,
    SitStill,
    BendStill,
    ArmRaise,
    Jump,
    Turn,
}

impl MotionKind {
    pub const ALL: [MotionKind; 8] = [
        MotionKind::Walk,
        MotionKind::Idle,
        MotionKind::Squat,
        MotionKind::SitStill,
        MotionKind::BendStill,
        MotionKind::ArmRaise,
        MotionKind::Jump,
        MotionKind::Turn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MotionKind::Walk => "walk",
            MotionKind::Idle => "idle",
            MotionKind::Squat => "squat",
            MotionKind::SitStill => "sit_still",
            MotionKind::BendStill => "bend_still",
            MotionKind::ArmRaise => "arm_raise",
            MotionKind::Jump => "jump",
            MotionKind::Turn => "turn",
        }
    }

    /// Corpus mix; still poses are deliberately imbalanced (sitting is far
    /// more common than bending) so the keypoint branch carries information
    /// the inertial prior lacks.
    fn weight(&self) -> f64 {
        match self {
            MotionKind::Walk => 0.30,
            MotionKind::Idle => 0.10,
            MotionKind::Squat => 0.10,
            MotionKind::SitStill => 0.20,
            MotionKind::BendStill => 0.03,
            MotionKind::ArmRaise => 0.12,
            MotionKind::Jump => 0.10,
            MotionKind::Turn => 0.05,
        }
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (u * (u * 6.0 - 15.0) + 10.0)
}

/// 0 before `t0`, 1 after `t1`, quintic ease between.
fn ramp(t: f64, t0: f64, t1: f64) -> f64 {
    if t1 <= t0 {
        return if t >= t1 { 1.0 } else { 0.0 };
    }
    smoothstep((t - t0) / (t1 - t0))
}

/// Piecewise quintic interpolation through `(time, value)` keyframes.
fn keyframed(keys: &[(f64, f64)], t: f64) -> f64 {
    if t <= keys[0].0 {
        return keys[0].1;
    }
    for w in keys.windows(2) {
        let ((t0, v0), (t1, v1)) = (w[0], w[1]);
        if t <= t1 {
            return v0 + (v1 - v0) * ramp(t, t0, t1);
        }
    }
    keys.last().unwrap().1
}

/// Local rotations of a relaxed stand: T-pose with the arms rolled down.
fn standing_rotations() -> Vec<Rotation> {
    let mut r = vec![Rotation::identity(); JOINT_COUNT];
    r[joints::L_SHOULDER] = Rotation::from_rotation_z(-ARM_DOWN);
    r[joints::R_SHOULDER] = Rotation::from_rotation_z(ARM_DOWN);
    r
}

/// Derives root translations from per-frame poses and a per-frame stance
/// foot. Pinned frames hold the stance foot fixed in the world; `None`
/// frames are airborne and follow a ballistic arc whose initial vertical
/// velocity continues the pinned motion.
fn integrate_root(
    tree: &KinematicTree,
    poses: &[Pose],
    stance: &[Option<usize>],
    start_xz: [f64; 2],
    launch_v0: Option<f64>,
    dt: f64,
) -> Vec<Vec3> {
    let n = poses.len();
    let rel: Vec<Vec<Vec3>> = poses.iter().map(|p| fk(tree, p).positions).collect();
    let floor_y = -tree
        .feet
        .iter()
        .map(|&f| rel[0][f].y)
        .fold(f64::INFINITY, f64::min);
    let mut out = Vec::with_capacity(n);
    out.push(Vec3::new(start_xz[0], floor_y, start_xz[1]));
    let mut flight: Option<(f64, f64, f64)> = None; // (launch y, v0y, elapsed)
    for k in 1..n {
        let prev = out[k - 1];
        let t = match stance[k] {
            Some(f) => {
                let pinned = prev - (rel[k][f] - rel[k - 1][f]);
                if flight.take().is_some() {
                    // Touchdown: the discrete ballistic arc rarely ends at
                    // floor level, so the stance foot is set down exactly.
                    Vec3::new(pinned.x, -rel[k][f].y, pinned.z)
                } else {
                    pinned
                }
            }
            None => {
                let (y0, v0, tau) = match flight {
                    Some((y0, v0, tau)) => (y0, v0, tau + dt),
                    None => {
                        // Takeoff: continue the pinned vertical velocity
                        // unless the builder supplied the analytic one.
                        let v0 = launch_v0.unwrap_or(if k >= 2 {
                            (out[k - 1].y - out[k - 2].y) / dt
                        } else {
                            0.0
                        });
                        (prev.y, v0, dt)
                    }
                };
                flight = Some((y0, v0, tau));
                Vec3::new(prev.x, y0 + v0 * tau - 4.9 * tau * tau, prev.z)
            }
        };
        out.push(t);
    }
    out
}

struct Built {
    poses: Vec<Pose>,
    stance: Vec<Option<usize>>,
    start_xz: [f64; 2],
    launch_v0: Option<f64>,
}

fn assemble(tree: &KinematicTree, built: Built) -> MotionClip {
    let dt = 1.0 / FRAME_RATE;
    let root_translations = integrate_root(
        tree,
        &built.poses,
        &built.stance,
        built.start_xz,
        built.launch_v0,
        dt,
    );
    MotionClip {
        frame_rate: FRAME_RATE,
        poses: built.poses,
        root_translations,
    }
}

fn frame_times(duration: f64) -> Vec<f64> {
    let n = (duration * FRAME_RATE).round() as usize;
    (0..n).map(|k| k as f64 / FRAME_RATE).collect()
}

fn build_walk(rng: &mut ChaCha8Rng) -> Built {
    let duration: f64 = rng.random_range(6.0..9.0);
    let speed = 2.2 / duration;
    let freq: f64 = rng.random_range(0.55..0.8);
    // Step length ties thigh swing amplitude to the forward speed.
    let amp = (speed / (4.0 * freq * 0.85)).asin();
    let knee = rng.random_range(0.35..0.55);
    let arm = 0.5 * amp;
    // Face roughly along +X or -X and cross the view laterally.
    let heading = rng.random_range(-0.25..0.25)
        + if rng.random::<bool>() { FRAC_PI_2 } else { -FRAC_PI_2 };
    let x0 = -1.1 * heading.sin().signum();
    let z0 = rng.random_range(3.2..3.8);
    let times = frame_times(duration);
    let end = *times.last().unwrap();
    let mut poses = Vec::with_capacity(times.len());
    let mut stance = Vec::with_capacity(times.len());
    for &t in &times {
        let r = ramp(t, 0.3, 1.3) * (1.0 - ramp(t, end - 1.3, end - 0.3));
        let phi = 2.0 * PI * freq * t;
        let mut rot = standing_rotations();
        rot[0] = Rotation::from_rotation_y(heading);
        rot[joints::L_HIP] = Rotation::from_rotation_x(-amp * r * phi.sin());
        rot[joints::R_HIP] = Rotation::from_rotation_x(amp * r * phi.sin());
        let bump = |x: f64| x.sin().max(0.0).powi(2);
        rot[joints::L_KNEE] = Rotation::from_rotation_x(knee * r * bump(phi - 1.5 * PI));
        rot[joints::R_KNEE] = Rotation::from_rotation_x(knee * r * bump(phi - 0.5 * PI));
        rot[joints::L_SHOULDER] =
            Rotation::from_rotation_x(arm * r * phi.sin()) * rot[joints::L_SHOULDER];
        rot[joints::R_SHOULDER] =
            Rotation::from_rotation_x(-arm * r * phi.sin()) * rot[joints::R_SHOULDER];
        rot[joints::SPINE1] = Rotation::from_rotation_z(0.03 * r * phi.sin());
        poses.push(Pose { local: rot });
        // Foot strike at thigh-forward extreme, lift-off at the opposite one.
        let cycle = phi.rem_euclid(2.0 * PI);
        let foot = if (FRAC_PI_2..3.0 * FRAC_PI_2).contains(&cycle) {
            tree_foot(0)
        } else {
            tree_foot(1)
        };
        stance.push(Some(foot));
    }
    Built {
        poses,
        stance,
        start_xz: [x0, z0],
        launch_v0: None,
    }
}

// Foot joint indices of the default humanoid; generators are written against
// that skeleton.
fn tree_foot(side: usize) -> usize {
    [joints::L_FOOT, joints::R_FOOT][side]
}

fn build_idle(rng: &mut ChaCha8Rng) -> Built {
    let duration = rng.random_range(6.0..12.0);
    let (f1, f2) = (rng.random_range(0.2..0.3), rng.random_range(0.12..0.2));
    let phase = rng.random_range(0.0..2.0 * PI);
    let yaw = rng.random_range(-0.25..0.25);
    let start_xz = [rng.random_range(-0.6..0.6), rng.random_range(2.6..4.2)];
    let times = frame_times(duration);
    let mut poses = Vec::with_capacity(times.len());
    for &t in &times {
        let r = ramp(t, 0.0, 1.0);
        let mut rot = standing_rotations();
        rot[0] = Rotation::from_rotation_y(yaw);
        rot[joints::SPINE1] =
            Rotation::from_rotation_x(0.04 * r * (2.0 * PI * f1 * t).sin())
                * Rotation::from_rotation_z(0.03 * r * (2.0 * PI * f2 * t + phase).sin());
        let drift = Rotation::from_rotation_x(0.03 * r * (2.0 * PI * f2 * t).sin());
        rot[joints::L_SHOULDER] = drift * rot[joints::L_SHOULDER];
        rot[joints::R_SHOULDER] = drift * rot[joints::R_SHOULDER];
        poses.push(Pose { local: rot });
    }
    let stance = vec![Some(tree_foot(0)); poses.len()];
    Built {
        poses,
        stance,
        start_xz,
        launch_v0: None,
    }
}

/// Symmetric crouch articulation: thighs pitch forward, knees fold twice as
/// far, ankles keep the feet flat. `lean` tips the torso along.
fn crouch_legs(rot: &mut [Rotation], theta: f64, lean: f64) {
    let hip = Rotation::from_rotation_x(-theta);
    let knee = Rotation::from_rotation_x(2.0 * theta);
    let ankle = Rotation::from_rotation_x(-theta);
    rot[joints::L_HIP] = hip;
    rot[joints::R_HIP] = hip;
    rot[joints::L_KNEE] = knee;
    rot[joints::R_KNEE] = knee;
    rot[joints::L_ANKLE] = ankle;
    rot[joints::R_ANKLE] = ankle;
    rot[joints::SPINE1] = Rotation::from_rotation_x(lean);
}

fn build_squat(rng: &mut ChaCha8Rng) -> Built {
    let duration = rng.random_range(6.0..10.0);
    let period = rng.random_range(3.5..4.5);
    let depth = rng.random_range(0.7..1.1);
    let start_xz = [rng.random_range(-0.6..0.6), rng.random_range(2.6..4.2)];
    let times = frame_times(duration);
    let mut poses = Vec::with_capacity(times.len());
    for &t in &times {
        let r = ramp(t, 0.2, 1.2);
        let theta = depth * r * 0.5 * (1.0 - (2.0 * PI * t / period).cos());
        let mut rot = standing_rotations();
        crouch_legs(&mut rot, theta, 0.3 * theta);
        // Arms reach forward as a counterweight.
        let reach = Rotation::from_rotation_x(-0.5 * theta);
        rot[joints::L_SHOULDER] = reach * rot[joints::L_SHOULDER];
        rot[joints::R_SHOULDER] = reach * rot[joints::R_SHOULDER];
        poses.push(Pose { local: rot });
    }
    let stance = vec![Some(tree_foot(0)); poses.len()];
    Built {
        poses,
        stance,
        start_xz,
        launch_v0: None,
    }
}

/// Shared timing for the still-pose generators: stand, ease into the target
/// pose, hold to the end.
struct StillTiming {
    duration: f64,
    settle_start: f64,
    settle_end: f64,
}

impl StillTiming {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let settle_start = rng.random_range(1.5..2.5);
        StillTiming {
            duration: rng.random_range(7.0..11.0),
            settle_start,
            settle_end: settle_start + 1.5,
        }
    }

    fn progress(&self, t: f64) -> f64 {
        ramp(t, self.settle_start, self.settle_end)
    }
}

/// Sit-down: thighs to horizontal, shanks staying vertical, so every IMU
/// orientation ends exactly where standing left it. The pinned feet keep the
/// pelvis dropping onto an imaginary chair behind the heels.
fn build_sit(timing: &StillTiming, start_xz: [f64; 2]) -> Built {
    let times = frame_times(timing.duration);
    let mut poses = Vec::with_capacity(times.len());
    for &t in &times {
        let theta = FRAC_PI_2 * timing.progress(t);
        let mut rot = standing_rotations();
        rot[joints::L_HIP] = Rotation::from_rotation_x(-theta);
        rot[joints::R_HIP] = Rotation::from_rotation_x(-theta);
        rot[joints::L_KNEE] = Rotation::from_rotation_x(theta);
        rot[joints::R_KNEE] = Rotation::from_rotation_x(theta);
        poses.push(Pose { local: rot });
    }
    let stance = vec![Some(tree_foot(0)); poses.len()];
    Built {
        poses,
        stance,
        start_xz,
        launch_v0: None,
    }
}

/// Bend-forward: the torso pitches while neck and shoulders counter-rotate,
/// so every IMU orientation again ends exactly where standing left it. Only
/// the accelerations during the transition tell this apart from sitting.
fn build_bend(timing: &StillTiming, start_xz: [f64; 2], beta_max: f64) -> Built {
    let times = frame_times(timing.duration);
    let mut poses = Vec::with_capacity(times.len());
    for &t in &times {
        let beta = beta_max * timing.progress(t);
        let mut rot = standing_rotations();
        rot[joints::SPINE1] = Rotation::from_rotation_x(beta);
        rot[joints::NECK] = Rotation::from_rotation_x(-beta);
        let counter = Rotation::from_rotation_x(-beta);
        rot[joints::L_SHOULDER] = counter * rot[joints::L_SHOULDER];
        rot[joints::R_SHOULDER] = counter * rot[joints::R_SHOULDER];
        poses.push(Pose { local: rot });
    }
    let stance = vec![Some(tree_foot(0)); poses.len()];
    Built {
        poses,
        stance,
        start_xz,
        launch_v0: None,
    }
}

fn build_arm_raise(rng: &mut ChaCha8Rng) -> Built {
    let duration = rng.random_range(6.0..10.0);
    let period = rng.random_range(3.0..5.0);
    let top = rng.random_range(0.05..0.2);
    let start_xz = [rng.random_range(-0.6..0.6), rng.random_range(2.6..4.2)];
    let times = frame_times(duration);
    let mut poses = Vec::with_capacity(times.len());
    for &t in &times {
        let r = ramp(t, 0.2, 1.0);
        let lift = r * 0.5 * (1.0 - (2.0 * PI * t / period).cos());
        // Roll interpolates from arms-down to nearly the T-pose.
        let roll = ARM_DOWN + (top - ARM_DOWN) * lift;
        let mut rot = standing_rotations();
        rot[joints::L_SHOULDER] = Rotation::from_rotation_z(-roll);
        rot[joints::R_SHOULDER] = Rotation::from_rotation_z(roll);
        let flex = 0.2 * lift;
        rot[joints::L_ELBOW] = Rotation::from_rotation_x(flex);
        rot[joints::R_ELBOW] = Rotation::from_rotation_x(flex);
        poses.push(Pose { local: rot });
    }
    let stance = vec![Some(tree_foot(0)); poses.len()];
    Built {
        poses,
        stance,
        start_xz,
        launch_v0: None,
    }
}

fn build_jump(rng: &mut ChaCha8Rng) -> Built {
    let duration = rng.random_range(6.0..9.0);
    let crouch: f64 = rng.random_range(0.85..0.95);
    let t1: f64 = rng.random_range(1.0..2.0);
    let extend = 0.25;
    let t_ext = t1 + 0.4;
    // Leave the ground halfway through the extension, where the quintic
    // ease reaches its peak rate; the legs finish straightening in the air.
    let launch = t_ext + extend / 2.0;
    let theta_launch = 0.5 * (crouch + 0.15);
    let theta_rate = 1.875 * (crouch - 0.15) / extend;
    // Root rise rate of the pinned crouch geometry (both leg segments).
    let v0 = 0.78 * theta_launch.sin() * theta_rate;
    let flight = 2.0 * v0 / 9.8;
    let land = launch + flight;
    let leg_keys = [
        (0.0, 0.0),
        (t1, 0.0),
        (t_ext, crouch),
        (t_ext + extend, 0.15),
        (land, 0.15),
        (land + 0.3, 0.5),
        (land + 0.9, 0.0),
    ];
    let start_xz = [rng.random_range(-0.6..0.6), rng.random_range(2.8..4.2)];
    let times = frame_times(duration);
    let mut poses = Vec::with_capacity(times.len());
    let mut stance = Vec::with_capacity(times.len());
    for &t in &times {
        let theta = keyframed(&leg_keys, t);
        let airborne = t > launch && t < land;
        // Mid-flight knee tuck lifts the feet clear of the floor.
        let tuck = if airborne {
            ((t - launch) / flight * PI).sin().powi(2)
        } else {
            0.0
        };
        let mut rot = standing_rotations();
        crouch_legs(&mut rot, theta, 0.25 * theta);
        rot[joints::L_KNEE] = Rotation::from_rotation_x(2.0 * theta + tuck);
        rot[joints::R_KNEE] = Rotation::from_rotation_x(2.0 * theta + tuck);
        // Arms swing down into the crouch, up during flight.
        let arm = Rotation::from_rotation_x(-0.6 * theta - 0.3 * tuck);
        rot[joints::L_SHOULDER] = arm * rot[joints::L_SHOULDER];
        rot[joints::R_SHOULDER] = arm * rot[joints::R_SHOULDER];
        poses.push(Pose { local: rot });
        stance.push(if airborne { None } else { Some(tree_foot(0)) });
    }
    Built {
        poses,
        stance,
        start_xz,
        launch_v0: Some(v0),
    }
}

fn build_turn(rng: &mut ChaCha8Rng) -> Built {
    let duration = rng.random_range(6.0..10.0);
    let period = rng.random_range(5.0..6.0);
    let sweep = rng.random_range(0.2..0.35);
    let start_xz = [rng.random_range(-0.5..0.5), rng.random_range(2.8..4.2)];
    let times = frame_times(duration);
    let mut poses = Vec::with_capacity(times.len());
    for &t in &times {
        let r = ramp(t, 0.2, 1.2);
        let yaw = sweep * r * (2.0 * PI * t / period).sin();
        let mut rot = standing_rotations();
        rot[0] = Rotation::from_rotation_y(yaw);
        // Head leads the turn slightly.
        rot[joints::NECK] = Rotation::from_rotation_y(0.4 * yaw);
        poses.push(Pose { local: rot });
    }
    let stance = vec![Some(tree_foot(0)); poses.len()];
    Built {
        poses,
        stance,
        start_xz,
        launch_v0: None,
    }
}

/// Deterministic single-clip generator.
pub fn generate(kind: MotionKind, seed: u64, tree: &KinematicTree) -> MotionClip {
    let salt = MotionKind::ALL.iter().position(|k| *k == kind).unwrap() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(salt + 1)));
    let built = match kind {
        MotionKind::Walk => build_walk(&mut rng),
        MotionKind::Idle => build_idle(&mut rng),
        MotionKind::Squat => build_squat(&mut rng),
        MotionKind::SitStill => {
            let timing = StillTiming::sample(&mut rng);
            let xz = [rng.random_range(-0.6..0.6), rng.random_range(2.6..4.2)];
            build_sit(&timing, xz)
        }
        MotionKind::BendStill => {
            let timing = StillTiming::sample(&mut rng);
            let xz = [rng.random_range(-0.6..0.6), rng.random_range(2.6..4.2)];
            let beta = rng.random_range(0.85..1.0);
            build_bend(&timing, xz, beta)
        }
        MotionKind::ArmRaise => build_arm_raise(&mut rng),
        MotionKind::Jump => build_jump(&mut rng),
        MotionKind::Turn => build_turn(&mut rng),
    };
    assemble(tree, built)
}

/// The bend-forward / sit-down twins: identical timing and placement, and by
/// construction identical IMU orientations at every frame. Returned as
/// `(bend, sit)`.
pub fn ambiguous_pair(seed: u64, tree: &KinematicTree) -> (MotionClip, MotionClip) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(7));
    let timing = StillTiming::sample(&mut rng);
    let xz = [rng.random_range(-0.5..0.5), rng.random_range(2.8..3.8)];
    let beta = rng.random_range(0.85..1.0);
    let bend = assemble(tree, build_bend(&timing, xz, beta));
    let sit = assemble(tree, build_sit(&timing, xz));
    (bend, sit)
}

/// Weighted random corpus of `count` clips. For `count >= 2` the last two
/// entries are always one ambiguous bend/sit pair.
pub fn generate_procedural_motions(
    count: usize,
    seed: u64,
    tree: &KinematicTree,
) -> Vec<(MotionClip, MotionKind)> {
    assert!(count >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = if count >= 2 { count - 2 } else { count };
    let total: f64 = MotionKind::ALL.iter().map(|k| k.weight()).sum();
    let mut out = Vec::with_capacity(count);
    for i in 0..sampled {
        let mut pick = rng.random_range(0.0..total);
        let mut kind = MotionKind::Walk;
        for k in MotionKind::ALL {
            pick -= k.weight();
            if pick <= 0.0 {
                kind = k;
                break;
            }
        }
        out.push((generate(kind, seed.wrapping_add(i as u64 * 131), tree), kind));
    }
    if count >= 2 {
        let (bend, sit) = ambiguous_pair(seed, tree);
        out.push((bend, MotionKind::BendStill));
        out.push((sit, MotionKind::SitStill));
    }
    out
}
