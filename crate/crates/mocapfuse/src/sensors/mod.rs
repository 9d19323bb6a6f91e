//! Sensor data types and synthesis.
//!
//! Six IMUs (left/right forearm, left/right shank, head, pelvis) deliver a
//! global orientation and a free acceleration per frame; a monocular detector
//! delivers per-joint 2D keypoints with confidences on the Z=1 image plane.
//! Both streams are synthesized here from ground-truth motion clips, then
//! optionally degraded by a [`Scenario`].

pub mod dataset;
pub mod procedural;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{project_z1, Rotation, Vec3};
use crate::skeleton::{fk, mount_rotations, KinematicTree, Pose};

/// Gravity as it appears in synthesized accelerometer output: a static sensor
/// reads exactly this vector.
pub const GRAVITY: Vec3 = Vec3::new(0.0, -9.8, 0.0);

/// Which coordinate frame a sensor snapshot currently lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameTag {
    Global,
    Camera,
    Root,
}

/// One frame of the six-IMU array.
#[derive(Debug, Clone)]
pub struct ImuFrame {
    pub orientations: [Rotation; 6],
    pub accelerations: [Vec3; 6],
    pub frame: FrameTag,
}

impl ImuFrame {
    pub const SENSOR_COUNT: usize = 6;
    pub const LEFT_FOREARM: usize = 0;
    pub const RIGHT_FOREARM: usize = 1;
    pub const LEFT_SHANK: usize = 2;
    pub const RIGHT_SHANK: usize = 3;
    pub const HEAD: usize = 4;
    pub const ROOT: usize = 5;

    /// Flat network input: all accelerations, then all rotation matrices
    /// row-major, sensor order. Length 72.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(72);
        for a in &self.accelerations {
            out.extend_from_slice(&[a.x, a.y, a.z]);
        }
        for r in &self.orientations {
            out.extend_from_slice(&r.to_row_major());
        }
        out
    }

    pub fn root_orientation(&self) -> Rotation {
        self.orientations[Self::ROOT]
    }

    pub fn stationary(frame: FrameTag) -> Self {
        ImuFrame {
            orientations: [Rotation::identity(); 6],
            accelerations: [GRAVITY; 6],
            frame,
        }
    }
}

/// One frame of 2D keypoints on the Z=1 plane with per-joint confidences in
/// [0, 1]. Zero confidence marks an unavailable detection.
#[derive(Debug, Clone)]
pub struct KeypointFrame {
    pub points: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
}

impl KeypointFrame {
    pub fn uniform(n: usize, confidence: f64) -> Self {
        KeypointFrame {
            points: vec![[0.0, 0.0]; n],
            confidences: vec![confidence; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean detection confidence, the reliability signal that drives fusion
    /// weighting and regime switching.
    pub fn sigma_mean(&self) -> f64 {
        if self.confidences.is_empty() {
            return 0.0;
        }
        self.confidences.iter().sum::<f64>() / self.confidences.len() as f64
    }
}

/// Ground-truth motion: per-frame joint rotations (entry 0 is the global root
/// orientation) plus the global root translation.
#[derive(Debug, Clone)]
pub struct MotionClip {
    pub frame_rate: f64,
    pub poses: Vec<Pose>,
    pub root_translations: Vec<Vec3>,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    /// World position of every joint at `frame`.
    pub fn world_positions(&self, tree: &KinematicTree, frame: usize) -> Vec<Vec3> {
        let jp = fk(tree, &self.poses[frame]);
        jp.positions
            .iter()
            .map(|p| p + self.root_translations[frame])
            .collect()
    }
}

/// Synthesizes the global-frame IMU array from a clip: orientations from the
/// mount joints' accumulated rotations, accelerations as the second finite
/// difference of the mount world positions plus [`GRAVITY`]. Endpoint frames
/// reuse the nearest interior difference, which is exact for quadratic paths.
pub fn synthesize_imus(clip: &MotionClip, tree: &KinematicTree) -> Vec<ImuFrame> {
    let n = clip.len();
    let mounts = tree.mounts.as_array();
    let mut mount_world: Vec<[Vec3; 6]> = Vec::with_capacity(n);
    let mut mount_rots: Vec<[Rotation; 6]> = Vec::with_capacity(n);
    for k in 0..n {
        let world = clip.world_positions(tree, k);
        mount_world.push(std::array::from_fn(|i| world[mounts[i]]));
        mount_rots.push(mount_rotations(tree, &clip.poses[k]));
    }
    let dt2 = clip.dt() * clip.dt();
    (0..n)
        .map(|k| {
            // Center the stencil at k, shifting it inward at the endpoints.
            let c = k.clamp(1, n.saturating_sub(2).max(1));
            let accelerations = std::array::from_fn(|i| {
                if n < 3 {
                    GRAVITY
                } else {
                    (mount_world[c + 1][i] - mount_world[c][i] * 2.0 + mount_world[c - 1][i])
                        / dt2
                        + GRAVITY
                }
            });
            ImuFrame {
                orientations: mount_rots[k],
                accelerations,
                frame: FrameTag::Global,
            }
        })
        .collect()
}

/// Projects every mapped joint of every frame through the camera; joints
/// behind the camera get zero confidence and keep their last visible
/// position. `correspondence` maps keypoint index to skeleton joint index
/// (`None` is the identity map over all joints).
pub fn synthesize_keypoints(
    clip: &MotionClip,
    tree: &KinematicTree,
    calib: &crate::geom::Calibration,
    correspondence: Option<&[usize]>,
) -> Vec<KeypointFrame> {
    let identity: Vec<usize> = (0..tree.joint_count()).collect();
    let map = correspondence.unwrap_or(&identity);
    let n = clip.len();
    let mut last_visible = vec![[0.0, 0.0]; map.len()];
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let world = clip.world_positions(tree, k);
        let mut kf = KeypointFrame::uniform(map.len(), 1.0);
        for (i, &joint) in map.iter().enumerate() {
            let cam = calib.imu_to_camera.apply(&world[joint]);
            match project_z1(&cam) {
                Ok(xy) => {
                    kf.points[i] = xy;
                    last_visible[i] = xy;
                }
                Err(_) => {
                    kf.points[i] = last_visible[i];
                    kf.confidences[i] = 0.0;
                }
            }
        }
        out.push(kf);
    }
    out
}

/// Timed window over `[start, end)` frames; `joints` limits an occlusion to
/// a subset of keypoints (absent means full body).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<Vec<usize>>,
}

impl Window {
    pub fn full(start: usize, end: usize) -> Self {
        Window {
            start,
            end,
            joints: None,
        }
    }

    fn covers(&self, frame: usize, joint: usize) -> bool {
        frame >= self.start
            && frame < self.end
            && self.joints.as_ref().map_or(true, |j| j.contains(&joint))
    }
}

/// Scripted degradation applied to the clean sensor streams.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Scenario {
    pub name: String,
    /// Partial occlusion: covered confidences decay to at most 0.3.
    pub occlusions: Vec<Window>,
    /// Subject out of view: covered confidences drop to exactly 0.
    pub out_of_view: Vec<Window>,
    /// Gaussian position noise (Z=1-plane units) on visible keypoints.
    pub keypoint_noise: f64,
    /// Orientation jitter magnitude (degrees) on every IMU, every frame.
    pub imu_jitter_deg: f64,
    /// Acceleration bias random-walk rate (m/s^2 added per frame step).
    pub accel_drift_rate: f64,
    pub seed: u64,
}

/// Confidence multiplier inside an occlusion window.
pub const OCCLUSION_DECAY: f64 = 0.3;

impl Scenario {
    pub fn clean(name: &str) -> Self {
        Scenario {
            name: name.to_string(),
            ..Default::default()
        }
    }

    /// Checks that every window lies inside a sequence of `len` frames and
    /// that noise magnitudes are non-negative.
    pub fn validate(&self, len: usize) -> crate::Result<()> {
        for w in self.occlusions.iter().chain(&self.out_of_view) {
            if w.start > w.end || w.end > len {
                return Err(crate::Error::Precondition(format!(
                    "scenario window [{}, {}) outside sequence of {len} frames",
                    w.start, w.end
                )));
            }
        }
        if self.keypoint_noise < 0.0 || self.imu_jitter_deg < 0.0 || self.accel_drift_rate < 0.0 {
            return Err(crate::Error::Precondition(
                "scenario noise magnitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Applies a scenario to both streams in place. Deterministic given
/// `scenario.seed`; an all-default scenario leaves the streams untouched.
pub fn apply_scenario(
    imus: &mut [ImuFrame],
    kps: &mut [KeypointFrame],
    scenario: &Scenario,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = Normal::new(0.0, scenario.keypoint_noise.max(1e-300)).unwrap();
    let drift = Normal::new(0.0, scenario.accel_drift_rate.max(1e-300)).unwrap();
    for (k, kf) in kps.iter_mut().enumerate() {
        for i in 0..kf.len() {
            if scenario.out_of_view.iter().any(|w| w.covers(k, i)) {
                kf.confidences[i] = 0.0;
                continue;
            }
            if kf.confidences[i] == 0.0 {
                continue;
            }
            if scenario.occlusions.iter().any(|w| w.covers(k, i)) {
                kf.confidences[i] *= OCCLUSION_DECAY;
            }
            if scenario.keypoint_noise > 0.0 {
                kf.points[i][0] += noise.sample(&mut rng);
                kf.points[i][1] += noise.sample(&mut rng);
            }
        }
    }
    if scenario.imu_jitter_deg > 0.0 || scenario.accel_drift_rate > 0.0 {
        let mut bias = [Vec3::zeros(); ImuFrame::SENSOR_COUNT];
        for frame in imus.iter_mut() {
            for i in 0..ImuFrame::SENSOR_COUNT {
                if scenario.imu_jitter_deg > 0.0 {
                    let angle = rng.random_range(0.0..scenario.imu_jitter_deg.to_radians());
                    let j = crate::geom::random_axis_angle(&mut rng, angle);
                    frame.orientations[i] = j * frame.orientations[i];
                }
                if scenario.accel_drift_rate > 0.0 {
                    bias[i] += Vec3::new(
                        drift.sample(&mut rng),
                        drift.sample(&mut rng),
                        drift.sample(&mut rng),
                    );
                    frame.accelerations[i] += bias[i];
                }
            }
        }
    }
}

/// Maximum world speed (m/s) and height (m) of a foot still counted as a
/// ground contact.
pub const CONTACT_SPEED_LIMIT: f64 = 0.15;
pub const CONTACT_HEIGHT_LIMIT: f64 = 0.12;

/// Derives per-frame ground-contact labels for both feet: a foot is in
/// contact when its world speed and height are both small.
pub fn derive_contacts(clip: &MotionClip, tree: &KinematicTree) -> Vec<[f64; 2]> {
    let n = clip.len();
    let feet = tree.feet;
    let world_feet: Vec<[Vec3; 2]> = (0..n)
        .map(|k| {
            let world = clip.world_positions(tree, k);
            [world[feet[0]], world[feet[1]]]
        })
        .collect();
    let dt = clip.dt();
    (0..n)
        .map(|k| {
            std::array::from_fn(|f| {
                let (a, b, span) = if n == 1 {
                    (0, 0, 1.0)
                } else if k == 0 {
                    (0, 1, dt)
                } else if k == n - 1 {
                    (n - 2, n - 1, dt)
                } else {
                    (k - 1, k + 1, 2.0 * dt)
                };
                let speed = (world_feet[b][f] - world_feet[a][f]).norm() / span;
                let height = world_feet[k][f].y;
                if speed < CONTACT_SPEED_LIMIT && height < CONTACT_HEIGHT_LIMIT {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Calibration;
    use crate::skeleton::{KinematicTree, JOINT_COUNT};
    use approx::assert_relative_eq;

    fn static_clip(frames: usize, root: Vec3) -> MotionClip {
        MotionClip {
            frame_rate: 30.0,
            poses: vec![Pose::identity(JOINT_COUNT); frames],
            root_translations: vec![root; frames],
        }
    }

    #[test]
    fn static_clip_reads_gravity() {
        let tree = KinematicTree::default_humanoid();
        let imus = synthesize_imus(&static_clip(10, Vec3::new(0.0, 0.9, 3.0)), &tree);
        assert_eq!(imus.len(), 10);
        for f in &imus {
            for a in &f.accelerations {
                assert_relative_eq!(*a, GRAVITY, epsilon = 1e-9);
            }
            for r in &f.orientations {
                assert!(r.frobenius_dist(&Rotation::identity()) < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_path_acceleration_exact() {
        // Root on a parabola: constant acceleration recovered exactly at
        // every frame, including the shifted endpoint stencils.
        let tree = KinematicTree::default_humanoid();
        let fr = 30.0;
        let acc = Vec3::new(0.4, -0.2, 0.1);
        let n = 12;
        let clip = MotionClip {
            frame_rate: fr,
            poses: vec![Pose::identity(JOINT_COUNT); n],
            root_translations: (0..n)
                .map(|k| {
                    let t = k as f64 / fr;
                    Vec3::new(0.0, 1.0, 3.0) + acc * (0.5 * t * t)
                })
                .collect(),
        };
        let imus = synthesize_imus(&clip, &tree);
        for f in &imus {
            for a in &f.accelerations {
                assert_relative_eq!(*a, acc + GRAVITY, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn flatten_layout() {
        let mut f = ImuFrame::stationary(FrameTag::Global);
        f.accelerations[0] = Vec3::new(1.0, 2.0, 3.0);
        f.orientations[5] = Rotation::from_rotation_z(std::f64::consts::FRAC_PI_2);
        let v = f.flatten();
        assert_eq!(v.len(), 72);
        assert_eq!(&v[0..3], &[1.0, 2.0, 3.0]);
        // Sensor 5 rotation occupies the last 9 slots; row 0 of Rz(90) is
        // (0, -1, 0).
        assert_relative_eq!(v[63], 0.0, epsilon = 1e-12);
        assert_relative_eq!(v[64], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn keypoints_project_and_occlude() {
        let tree = KinematicTree::default_humanoid();
        let calib = Calibration::default();
        // In front of the camera: all confident.
        let front =
            synthesize_keypoints(&static_clip(2, Vec3::new(0.0, 0.9, 3.0)), &tree, &calib, None);
        assert_eq!(front[0].len(), JOINT_COUNT);
        assert!(front[0].confidences.iter().all(|&c| c == 1.0));
        assert_relative_eq!(front[0].sigma_mean(), 1.0);
        // Head projects above the pelvis in camera Y.
        let pelvis = front[0].points[0];
        let head = front[0].points[crate::skeleton::joints::HEAD];
        assert!(head[1] > pelvis[1]);
        // Behind the camera: all zero confidence.
        let behind =
            synthesize_keypoints(&static_clip(2, Vec3::new(0.0, 0.9, -3.0)), &tree, &calib, None);
        assert!(behind[0].confidences.iter().all(|&c| c == 0.0));
        assert_relative_eq!(behind[0].sigma_mean(), 0.0);
        // Subset correspondence picks out the mapped joints.
        let subset =
            synthesize_keypoints(&static_clip(1, Vec3::new(0.0, 0.9, 3.0)), &tree, &calib, Some(&[0, 15]));
        assert_eq!(subset[0].len(), 2);
        assert_eq!(subset[0].points[0], front[0].points[0]);
        assert_eq!(subset[0].points[1], front[0].points[15]);
    }

    #[test]
    fn scenario_windows_and_noise() {
        let tree = KinematicTree::default_humanoid();
        let calib = Calibration::default();
        let clip = static_clip(30, Vec3::new(0.0, 0.9, 3.0));
        let clean_kps = synthesize_keypoints(&clip, &tree, &calib, None);
        let clean_imus = synthesize_imus(&clip, &tree);
        let scenario = Scenario {
            name: "test".into(),
            occlusions: vec![Window::full(5, 8)],
            out_of_view: vec![Window::full(10, 20)],
            keypoint_noise: 0.01,
            imu_jitter_deg: 2.0,
            accel_drift_rate: 0.01,
            seed: 42,
        };
        scenario.validate(30).unwrap();
        let mut kps = clean_kps.clone();
        let mut imus = clean_imus.clone();
        apply_scenario(&mut imus, &mut kps, &scenario);
        // Occlusion decays confidence, out-of-view zeroes it.
        assert!(kps[5].confidences.iter().all(|&c| c <= OCCLUSION_DECAY));
        assert!(kps[5].sigma_mean() > 0.0);
        assert!(kps[10].confidences.iter().all(|&c| c == 0.0));
        assert!(kps[19].sigma_mean() == 0.0 && kps[20].sigma_mean() > 0.0);
        // Noise moved visible keypoints and jitter moved orientations.
        assert!(kps[0].points != clean_kps[0].points);
        assert!(imus[0].orientations[0].frobenius_dist(&clean_imus[0].orientations[0]) > 0.0);
        // Jitter magnitude bounded by the script.
        for (f, c) in imus.iter().zip(&clean_imus) {
            for i in 0..6 {
                assert!(f.orientations[i].geodesic_to(&c.orientations[i]).to_degrees() < 2.001);
            }
        }
        // Determinism.
        let (mut k2, mut i2) = (clean_kps.clone(), clean_imus.clone());
        apply_scenario(&mut i2, &mut k2, &scenario);
        assert_eq!(k2[0].points, kps[0].points);
        assert_eq!(
            i2[3].accelerations[2],
            imus[3].accelerations[2]
        );
        // Empty script is the identity.
        let (mut k3, mut i3) = (clean_kps.clone(), clean_imus.clone());
        apply_scenario(&mut i3, &mut k3, &Scenario::clean("noop"));
        assert_eq!(k3[0].points, clean_kps[0].points);
        assert_eq!(i3[0].accelerations[0], clean_imus[0].accelerations[0]);
        // Out-of-range window rejected.
        let bad = Scenario {
            out_of_view: vec![Window::full(0, 31)],
            ..Scenario::clean("bad")
        };
        assert!(bad.validate(30).is_err());
    }

    #[test]
    fn yaw_rotation_equivariance() {
        // Rotating a motion about the gravity axis rotates the synthesized
        // orientations and accelerations the same way (gravity is fixed by
        // the rotation, so it passes through).
        let tree = KinematicTree::default_humanoid();
        let fr = 30.0;
        let n = 10;
        let base = MotionClip {
            frame_rate: fr,
            poses: vec![Pose::identity(JOINT_COUNT); n],
            root_translations: (0..n)
                .map(|k| {
                    let t = k as f64 / fr;
                    Vec3::new(0.3 * t * t, 0.9, 3.0 + 0.2 * t)
                })
                .collect(),
        };
        let q = Rotation::from_rotation_y(0.7);
        let mut rotated = base.clone();
        for pose in rotated.poses.iter_mut() {
            pose.local[0] = q * pose.local[0];
        }
        for t in rotated.root_translations.iter_mut() {
            *t = q.apply(t);
        }
        let a = synthesize_imus(&base, &tree);
        let b = synthesize_imus(&rotated, &tree);
        for (fa, fb) in a.iter().zip(&b) {
            for i in 0..6 {
                assert!((q * fa.orientations[i]).frobenius_dist(&fb.orientations[i]) < 1e-9);
                assert_relative_eq!(
                    q.apply(&(fa.accelerations[i] - GRAVITY)) + GRAVITY,
                    fb.accelerations[i],
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn contacts_for_static_stand() {
        let tree = KinematicTree::default_humanoid();
        // Feet on the floor (root at standing height): both in contact.
        let clip = static_clip(5, Vec3::new(0.0, 0.90, 3.0));
        let contacts = derive_contacts(&clip, &tree);
        assert!(contacts.iter().all(|c| c == &[1.0, 1.0]));
        // Root raised a meter: feet high, no contact.
        let raised = static_clip(5, Vec3::new(0.0, 1.9, 3.0));
        let contacts = derive_contacts(&raised, &tree);
        assert!(contacts.iter().all(|c| c == &[0.0, 0.0]));
    }
}
