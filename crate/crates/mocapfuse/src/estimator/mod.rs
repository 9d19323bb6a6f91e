//! Per-frame estimation stages: joint positions in two coordinate frames,
//! confidence-weighted fusion, rotation assembly, and the translation
//! branch (contacts, velocities, complementary filtering, gravity).
//!
//! Everything is written against [`NetRunner`] so the pipeline decides when
//! hidden states advance; the functions themselves are otherwise pure.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{
    imu_to_camera, imu_to_root, root_normalize, rot_from_6d, rot_to_6d, Calibration, Rot6D,
    Rotation, Vec3,
};
use crate::nn::{NetRunner, TrainSequence};
use crate::sensors::dataset::SequenceData;
use crate::sensors::{derive_contacts, FrameTag, ImuFrame, KeypointFrame};
use crate::skeleton::{fk, global_rotations, JointPositions, KinematicTree, Pose, JOINT_COUNT};
use crate::{Error, Result};

/// Flattened IMU frame width: 6 sensors, 3 acceleration entries and 9
/// rotation entries each.
pub const IMU_DIM: usize = 72;
/// Root-normalized keypoint vector width.
pub const KP_DIM: usize = 3 * JOINT_COUNT;
/// Flattened joint position width.
pub const POS_DIM: usize = 3 * JOINT_COUNT;
/// Six-dimensional rotation output width.
pub const ROT6D_DIM: usize = 6 * JOINT_COUNT;

/// Diagnostic flags raised while producing one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameFlags {
    /// A joint's rotation output was degenerate and the previous frame's
    /// rotation was reused.
    pub rotation_fallback: bool,
    /// The refinement line search failed and the frame kept its unrefined
    /// estimate.
    pub line_search_failed: bool,
    pub pose_feedback: bool,
    pub translation_feedback: bool,
}

/// One frame of fused output.
#[derive(Debug, Clone)]
pub struct MotionEstimate {
    /// Root-frame pose; the root entry is the identity.
    pub theta_r: Pose,
    /// Camera-frame pose; the root entry carries the calibrated root
    /// orientation in camera coordinates.
    pub theta_c: Pose,
    /// Fused root-relative joint positions in root coordinates.
    pub joints_root: Vec<Vec3>,
    /// Root-relative joint positions in camera coordinates, from the camera
    /// pose.
    pub joints_camera: Vec<Vec3>,
    /// Root translation in camera coordinates.
    pub t_c: Vec3,
    pub contacts: [f64; 2],
    pub sigma_mean: f64,
    pub flags: FrameFlags,
}

fn positions_from_flat(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

fn flatten_positions(p: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * p.len());
    for v in p {
        out.extend_from_slice(&[v.x, v.y, v.z]);
    }
    out
}

/// Root-frame joint positions from root-frame inertial input.
///
/// The root block of a root-frame IMU must be the identity; anything else
/// means the caller skipped the frame transform.
pub fn estimate_joints_root(p1: &mut NetRunner, x_r: &ImuFrame) -> Result<Vec<Vec3>> {
    if x_r.frame != FrameTag::Root {
        return Err(Error::Precondition(
            "root-frame position estimator fed a non-root IMU frame".into(),
        ));
    }
    if x_r.orientations[ImuFrame::ROOT]
        .frobenius_dist(&Rotation::identity())
        > 1e-9
    {
        return Err(Error::Precondition(
            "root IMU orientation is not the identity in a root-frame input".into(),
        ));
    }
    let y = p1.step(&x_r.flatten())?;
    Ok(positions_from_flat(&y))
}

/// Camera-frame joint positions from camera-frame inertial input and
/// root-normalized keypoints.
pub fn estimate_joints_camera(
    p2: &mut NetRunner,
    x_c: &ImuFrame,
    kp: &[f64],
) -> Result<Vec<Vec3>> {
    if x_c.frame != FrameTag::Camera {
        return Err(Error::Precondition(
            "camera-frame position estimator fed a non-camera IMU frame".into(),
        ));
    }
    if kp.len() != KP_DIM {
        return Err(Error::DimensionMismatch {
            expected: KP_DIM,
            got: kp.len(),
            context: "root-normalized keypoints",
        });
    }
    let mut input = x_c.flatten();
    input.extend_from_slice(kp);
    let y = p2.step(&input)?;
    Ok(positions_from_flat(&y))
}

/// Confidence-weighted blend of the two position estimates, expressed in the
/// root frame. Below `lower` mean confidence the inertial estimate wins
/// outright; above `upper` the camera estimate (rotated into the root frame
/// by the inverse of the camera-frame root orientation) wins.
pub fn fuse_joints(
    p_root: &[Vec3],
    p_camera: &[Vec3],
    root_in_camera: &Rotation,
    sigma_mean: f64,
    lower: f64,
    upper: f64,
) -> Result<Vec<Vec3>> {
    if p_root.len() != p_camera.len() {
        return Err(Error::LengthMismatch(p_root.len(), p_camera.len()));
    }
    let w = ((sigma_mean - lower) / (upper - lower)).clamp(0.0, 1.0);
    let inv = root_in_camera.inverse();
    Ok(p_root
        .iter()
        .zip(p_camera)
        .map(|(r, c)| r * (1.0 - w) + inv.apply(c) * w)
        .collect())
}

/// Converts raw 6D blocks to local rotations, reusing the previous frame's
/// rotation for any degenerate block. Returns the pose (root forced to the
/// identity) and whether any fallback happened.
pub fn rotations_from_6d(raw: &[f64], previous: &Pose) -> Result<(Vec<Rot6D>, Pose, bool)> {
    if raw.len() != ROT6D_DIM {
        return Err(Error::DimensionMismatch {
            expected: ROT6D_DIM,
            got: raw.len(),
            context: "6D rotation output",
        });
    }
    let mut six = Vec::with_capacity(JOINT_COUNT);
    let mut local = Vec::with_capacity(JOINT_COUNT);
    let mut fell_back = false;
    for j in 0..JOINT_COUNT {
        let block: [f64; 6] = raw[6 * j..6 * j + 6].try_into().unwrap();
        six.push(Rot6D(block));
        match rot_from_6d(&Rot6D(block)) {
            Ok(r) => local.push(r),
            Err(Error::DegenerateInput(_)) => {
                local.push(previous.local[j]);
                fell_back = true;
            }
            Err(e) => return Err(e),
        }
    }
    local[0] = Rotation::identity();
    Ok((six, Pose { local }, fell_back))
}

/// Joint rotations from fused positions and root-frame inertial input.
pub fn estimate_rotations(
    p3: &mut NetRunner,
    fused: &[Vec3],
    x_r: &ImuFrame,
    previous: &Pose,
) -> Result<(Vec<Rot6D>, Pose, bool)> {
    let mut input = flatten_positions(fused);
    input.extend_from_slice(&x_r.flatten());
    let raw = p3.step(&input)?;
    rotations_from_6d(&raw, previous)
}

/// Per-foot contact probabilities.
pub fn estimate_contacts(t1: &mut NetRunner, x_r: &ImuFrame) -> Result<[f64; 2]> {
    let y = t1.step(&x_r.flatten())?;
    if y.len() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: y.len(),
            context: "contact output",
        });
    }
    Ok([y[0], y[1]])
}

/// Root velocity in the input frame of the velocity network.
pub fn estimate_velocity(t2: &mut NetRunner, x: &ImuFrame) -> Result<Vec3> {
    let y = t2.step(&x.flatten())?;
    if y.len() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: y.len(),
            context: "velocity output",
        });
    }
    Ok(Vec3::new(y[0], y[1], y[2]))
}

/// Input row for the camera-translation network: flattened camera-frame IMU,
/// raw normalized keypoint coordinates, then confidences.
pub fn translation_input(x_c: &ImuFrame, kp: &KeypointFrame) -> Result<Vec<f64>> {
    if kp.len() != JOINT_COUNT {
        return Err(Error::DimensionMismatch {
            expected: JOINT_COUNT,
            got: kp.len(),
            context: "translation keypoints",
        });
    }
    let mut input = x_c.flatten();
    for p in &kp.points {
        input.extend_from_slice(p);
    }
    input.extend_from_slice(&kp.confidences);
    Ok(input)
}

/// Direct camera-frame translation observation.
pub fn estimate_translation_camera(
    t3: &mut NetRunner,
    x_c: &ImuFrame,
    kp: &KeypointFrame,
) -> Result<Vec3> {
    let y = t3.step(&translation_input(x_c, kp)?)?;
    Ok(Vec3::new(y[0], y[1], y[2]))
}

/// Velocity of one foot between consecutive frames, from root-relative
/// positions in a shared frame.
pub fn foot_velocity(prev: &[Vec3], cur: &[Vec3], foot: usize, dt: f64) -> Vec3 {
    (cur[foot] - prev[foot]) / dt
}

/// Picks the root velocity: below the contact threshold the network velocity
/// is trusted; at or above it the supporting foot (the higher-probability
/// one) is assumed planted, making the root move opposite to it.
pub fn select_velocity(
    contacts: [f64; 2],
    threshold: f64,
    v_net: Vec3,
    v_feet: [Vec3; 2],
) -> Vec3 {
    let max = contacts[0].max(contacts[1]);
    if max >= threshold {
        let supporting = if contacts[0] >= contacts[1] { 0 } else { 1 };
        -v_feet[supporting]
    } else {
        v_net
    }
}

/// Complementary filter over dead-reckoned and observed translation.
///
/// With `scale_velocity` set (the default) the velocity increment is scaled
/// by the same `1 - alpha` as the previous translation; clearing it keeps
/// the increment at full weight.
pub fn complementary_fuse(
    t_prev: Vec3,
    v: Vec3,
    dt: f64,
    t_obs: Vec3,
    sigma_mean: f64,
    gain: f64,
    scale_velocity: bool,
) -> Vec3 {
    let alpha = gain * sigma_mean;
    let vel_weight = if scale_velocity { 1.0 - alpha } else { 1.0 };
    t_prev * (1.0 - alpha) + v * (dt * vel_weight) + t_obs * alpha
}

/// Accumulated downward speed while airborne.
#[derive(Debug, Clone, Default)]
pub struct GravityState {
    pub velocity: f64,
}

/// Applies gravity while both feet are off the ground and clamps the lowest
/// joint to the floor plane. Positions and the translation are in camera
/// coordinates; the calibration rotation maps the gravity-aligned frame to
/// the camera.
pub fn apply_gravity_velocity(
    t_c: Vec3,
    max_contact: f64,
    threshold: f64,
    dt: f64,
    state: &mut GravityState,
    joints_camera: &[Vec3],
    calib: &Calibration,
    rate: f64,
    terminal: f64,
) -> Vec3 {
    let to_camera = &calib.imu_to_camera;
    let to_global = to_camera.inverse();
    let mut t = t_c;
    if max_contact >= threshold {
        state.velocity = 0.0;
    } else {
        let v0 = state.velocity;
        let v1 = (v0 + rate * dt).min(terminal);
        state.velocity = v1;
        let drop = 0.5 * (v0 + v1) * dt;
        t += to_camera.apply(&Vec3::new(0.0, -drop, 0.0));
    }
    let mut lowest = f64::INFINITY;
    for p in joints_camera {
        let world = to_global.apply(&(p + t));
        lowest = lowest.min(world.y);
    }
    if lowest < 0.0 {
        t += to_camera.apply(&Vec3::new(0.0, -lowest, 0.0));
    }
    t
}

/// Ground-truth root-frame pose: local rotations with the root zeroed out.
pub fn root_frame_pose(pose: &Pose) -> Pose {
    let mut local = pose.local.clone();
    local[0] = Rotation::identity();
    Pose { local }
}

/// Ground-truth camera-frame pose: the root carries the calibrated global
/// root orientation.
pub fn camera_frame_pose(pose: &Pose, calib: &Calibration) -> Pose {
    let mut local = pose.local.clone();
    local[0] = calib.imu_to_camera * pose.local[0];
    Pose { local }
}

fn rot6d_and_positions_row(tree: &KinematicTree, pose: &Pose) -> Vec<f64> {
    let mut row = Vec::with_capacity(ROT6D_DIM + POS_DIM);
    for r in &pose.local {
        row.extend_from_slice(&rot_to_6d(r).0);
    }
    row.extend_from_slice(&fk(tree, pose).flatten());
    row
}

/// Per-frame measured inputs shared by the assembly functions.
struct MeasuredFrames {
    x_r: Vec<ImuFrame>,
    x_c: Vec<ImuFrame>,
}

fn measured(seq: &SequenceData, calib: &Calibration) -> MeasuredFrames {
    MeasuredFrames {
        x_r: seq.imus.iter().map(imu_to_root).collect(),
        x_c: seq.imus.iter().map(|f| imu_to_camera(f, calib)).collect(),
    }
}

/// Root-frame position sequences with initializer observations.
pub fn assemble_pose_root(
    corpus: &[SequenceData],
    tree: &KinematicTree,
    calib: &Calibration,
) -> Vec<TrainSequence> {
    corpus
        .iter()
        .map(|seq| {
            let m = measured(seq, calib);
            let targets: Vec<Vec<f64>> = seq
                .clip
                .poses
                .iter()
                .map(|p| fk(tree, &root_frame_pose(p)).flatten())
                .collect();
            TrainSequence {
                inputs: m.x_r.iter().map(ImuFrame::flatten).collect(),
                init_obs: Some(targets.clone()),
                targets,
            }
        })
        .collect()
}

/// Camera-frame position sequences driven by IMU plus keypoints.
pub fn assemble_pose_camera(
    corpus: &[SequenceData],
    tree: &KinematicTree,
    calib: &Calibration,
) -> Vec<TrainSequence> {
    corpus
        .iter()
        .map(|seq| {
            let m = measured(seq, calib);
            let mut last_root: Option<[f64; 2]> = None;
            let inputs: Vec<Vec<f64>> = seq
                .keypoints
                .iter()
                .zip(&m.x_c)
                .map(|(kp, x_c)| {
                    let rn = root_normalize(kp, crate::skeleton::joints::PELVIS, last_root);
                    if rn.root_valid {
                        last_root = Some(rn.root);
                    }
                    let mut row = x_c.flatten();
                    row.extend_from_slice(&rn.vector);
                    row
                })
                .collect();
            let targets: Vec<Vec<f64>> = seq
                .clip
                .poses
                .iter()
                .map(|p| fk(tree, &camera_frame_pose(p, calib)).flatten())
                .collect();
            TrainSequence {
                inputs,
                targets,
                init_obs: None,
            }
        })
        .collect()
}

/// Rotation sequences: fused positions (ground truth plus noise standing in
/// for estimation error) and root-frame IMU in, 6D blocks and positions out.
pub fn assemble_rotation(
    corpus: &[SequenceData],
    tree: &KinematicTree,
    calib: &Calibration,
    noise: f64,
    seed: u64,
) -> Vec<TrainSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|seq| {
            let m = measured(seq, calib);
            let mut inputs = Vec::with_capacity(seq.clip.len());
            let mut targets = Vec::with_capacity(seq.clip.len());
            for (pose, x_r) in seq.clip.poses.iter().zip(&m.x_r) {
                let rooted = root_frame_pose(pose);
                let mut row = fk(tree, &rooted).flatten();
                for v in row.iter_mut() {
                    *v += noise * rng.random_range(-1.0..1.0);
                }
                row.extend_from_slice(&x_r.flatten());
                inputs.push(row);
                targets.push(rot6d_and_positions_row(tree, &rooted));
            }
            TrainSequence {
                inputs,
                targets,
                init_obs: None,
            }
        })
        .collect()
}

/// Camera-frame rotation sequences for the camera-only variant.
pub fn assemble_rotation_camera(
    corpus: &[SequenceData],
    tree: &KinematicTree,
    calib: &Calibration,
    noise: f64,
    seed: u64,
) -> Vec<TrainSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|seq| {
            let m = measured(seq, calib);
            let mut inputs = Vec::with_capacity(seq.clip.len());
            let mut targets = Vec::with_capacity(seq.clip.len());
            for (pose, x_c) in seq.clip.poses.iter().zip(&m.x_c) {
                let cam = camera_frame_pose(pose, calib);
                let mut row = fk(tree, &cam).flatten();
                for v in row.iter_mut() {
                    *v += noise * rng.random_range(-1.0..1.0);
                }
                row.extend_from_slice(&x_c.flatten());
                inputs.push(row);
                targets.push(rot6d_and_positions_row(tree, &cam));
            }
            TrainSequence {
                inputs,
                targets,
                init_obs: None,
            }
        })
        .collect()
}

/// Foot contact sequences; `camera_frame` switches the inertial input frame.
pub fn assemble_contacts(
    corpus: &[SequenceData],
    tree: &KinematicTree,
    calib: &Calibration,
    camera_frame: bool,
) -> Vec<TrainSequence> {
    corpus
        .iter()
        .map(|seq| {
            let m = measured(seq, calib);
            let frames = if camera_frame { &m.x_c } else { &m.x_r };
            let labels = derive_contacts(&seq.clip, tree);
            TrainSequence {
                inputs: frames.iter().map(ImuFrame::flatten).collect(),
                targets: labels.iter().map(|c| vec![c[0], c[1]]).collect(),
                init_obs: None,
            }
        })
        .collect()
}

/// Root velocity sequences. Targets are world velocities rotated into the
/// root frame, or into the camera frame for the camera-only variant.
pub fn assemble_velocity(
    corpus: &[SequenceData],
    calib: &Calibration,
    camera_frame: bool,
) -> Vec<TrainSequence> {
    corpus
        .iter()
        .map(|seq| {
            let m = measured(seq, calib);
            let frames = if camera_frame { &m.x_c } else { &m.x_r };
            let dt = seq.clip.dt();
            let n = seq.clip.len();
            let mut targets = Vec::with_capacity(n);
            for k in 0..n {
                let v_world = if k == 0 {
                    Vec3::zeros()
                } else {
                    (seq.clip.root_translations[k] - seq.clip.root_translations[k - 1]) / dt
                };
                let v = if camera_frame {
                    calib.imu_to_camera.apply(&v_world)
                } else {
                    seq.clip.poses[k].local[0].inverse().apply(&v_world)
                };
                targets.push(vec![v.x, v.y, v.z]);
            }
            TrainSequence {
                inputs: frames.iter().map(ImuFrame::flatten).collect(),
                targets,
                init_obs: None,
            }
        })
        .collect()
}

/// Camera translation sequences: camera-frame IMU plus raw keypoints in,
/// camera-frame root translation out.
pub fn assemble_translation(
    corpus: &[SequenceData],
    calib: &Calibration,
) -> Result<Vec<TrainSequence>> {
    corpus
        .iter()
        .map(|seq| {
            let m = measured(seq, calib);
            let inputs: Result<Vec<Vec<f64>>> = seq
                .keypoints
                .iter()
                .zip(&m.x_c)
                .map(|(kp, x_c)| translation_input(x_c, kp))
                .collect();
            let targets: Vec<Vec<f64>> = seq
                .clip
                .root_translations
                .iter()
                .map(|t| {
                    let c = calib.imu_to_camera.apply(t);
                    vec![c.x, c.y, c.z]
                })
                .collect();
            Ok(TrainSequence {
                inputs: inputs?,
                targets,
                init_obs: None,
            })
        })
        .collect()
}

/// Camera-frame root orientation of a ground-truth pose, as fed to the
/// fusion blend.
pub fn gt_root_in_camera(pose: &Pose, calib: &Calibration) -> Rotation {
    calib.imu_to_camera * pose.local[0]
}

/// Root-relative camera-frame joint positions of an estimate's camera pose.
pub fn camera_joints(tree: &KinematicTree, theta_c: &Pose) -> Vec<Vec3> {
    fk(tree, theta_c).positions
}

/// Camera-frame global rotations at the six mount joints, used by the
/// orientation energy.
pub fn mount_orientations_camera(tree: &KinematicTree, theta_c: &Pose) -> [Rotation; 6] {
    let rots = global_rotations(tree, theta_c);
    let m = tree.mounts.as_array();
    std::array::from_fn(|i| rots[m[i]])
}

/// Flattened fused positions, exposed for the rotation network input.
pub fn rotation_input(fused: &[Vec3], x_r: &ImuFrame) -> Vec<f64> {
    let mut input = flatten_positions(fused);
    input.extend_from_slice(&x_r.flatten());
    input
}

pub use crate::skeleton::JointPositions as Positions;
