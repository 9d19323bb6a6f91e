//! Per-frame pose refinement: a weighted energy over reprojection,
//! 3D anchors, a robust pose prior, hinge limits, and mount orientation
//! agreement, minimized with a single quasi-Newton iteration.
//!
//! The optimization variables are the axis-angle vectors of every joint
//! except the root, plus the camera-frame translation. The root orientation
//! stays fixed so the camera pose keeps matching the calibrated root sensor
//! exactly.

use serde::{Deserialize, Serialize};

use crate::geom::{Rotation, Vec3, MIN_PROJECT_DEPTH};
use crate::nn::tape::{self, TMat3, TVec3, Tape, Var};
use crate::nn::{lbfgs_minimize, LbfgsResult};
use crate::sensors::KeypointFrame;
use crate::skeleton::{KinematicTree, Pose, JOINT_COUNT};
use crate::{Error, Result};

/// Energy weights and optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineWeights {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_prior: f64,
    pub lambda_angle: f64,
    pub lambda_ori: f64,
    /// Scale of the robust penalty on joint angles, radians.
    pub rho_scale: f64,
    pub iterations: usize,
    pub history: usize,
}

impl Default for RefineWeights {
    fn default() -> Self {
        RefineWeights {
            lambda_2d: 1.0,
            lambda_3d: 1.0,
            lambda_prior: 0.1,
            lambda_angle: 15.2,
            lambda_ori: 0.5,
            rho_scale: 0.3,
            iterations: 1,
            history: 10,
        }
    }
}

/// Observations for one frame, all in camera coordinates.
#[derive(Debug)]
pub struct RefineProblem<'a> {
    pub tree: &'a KinematicTree,
    pub weights: &'a RefineWeights,
    /// Normalized keypoints with confidences; joints behind the camera
    /// contribute nothing regardless of confidence.
    pub keypoints: &'a KeypointFrame,
    /// Absolute target joint positions.
    pub targets_3d: &'a [Vec3],
    /// Calibrated sensor orientations at the six mounts.
    pub mount_targets: &'a [Rotation; 6],
}

/// Refined frame with the energies bracketing the run.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub pose: Pose,
    pub translation: Vec3,
    pub energy_before: f64,
    pub energy_after: f64,
    pub line_search_failed: bool,
}

/// Variable count: three per non-root joint plus the translation.
pub const VAR_COUNT: usize = 3 * (JOINT_COUNT - 1) + 3;

fn pack(pose: &Pose, t_c: &Vec3) -> Vec<f64> {
    let aa = pose.to_axis_angles();
    let mut x = Vec::with_capacity(VAR_COUNT);
    for a in &aa[1..] {
        x.extend_from_slice(&[a.x, a.y, a.z]);
    }
    x.extend_from_slice(&[t_c.x, t_c.y, t_c.z]);
    x
}

fn unpack(x: &[f64], root: Rotation) -> (Pose, Vec3) {
    let mut local = Vec::with_capacity(JOINT_COUNT);
    local.push(root);
    for j in 0..JOINT_COUNT - 1 {
        local.push(Rotation::from_axis_angle(&Vec3::new(
            x[3 * j],
            x[3 * j + 1],
            x[3 * j + 2],
        )));
    }
    let t = Vec3::new(
        x[VAR_COUNT - 3],
        x[VAR_COUNT - 2],
        x[VAR_COUNT - 1],
    );
    (Pose { local }, t)
}

/// Energy and gradient at `x` for a fixed root orientation.
pub fn energy(problem: &RefineProblem, root: &Rotation, x: &[f64]) -> (f64, Vec<f64>) {
    let w = problem.weights;
    let tree = problem.tree;
    let mut tp = Tape::new();
    let vars: Vec<Var> = x.iter().map(|&v| tp.input(v)).collect();

    let mut locals = Vec::with_capacity(JOINT_COUNT);
    locals.push(TMat3::constants(&mut tp, root.matrix()));
    let mut aa_vars = Vec::with_capacity(JOINT_COUNT - 1);
    for j in 0..JOINT_COUNT - 1 {
        let aa = TVec3([vars[3 * j], vars[3 * j + 1], vars[3 * j + 2]]);
        aa_vars.push(aa);
        locals.push(tape::rodrigues(&mut tp, &aa));
    }
    let t = TVec3([
        vars[VAR_COUNT - 3],
        vars[VAR_COUNT - 2],
        vars[VAR_COUNT - 1],
    ]);
    let (positions, rotations) = tape::fk_on_tape(&mut tp, tree, &locals);

    let mut terms: Vec<Var> = Vec::new();

    // Reprojection against confident, visible keypoints.
    if w.lambda_2d != 0.0 {
        for (j, p) in positions.iter().enumerate() {
            let sigma = problem.keypoints.confidences[j];
            if sigma <= 0.0 {
                continue;
            }
            let abs = p.add(&mut tp, &t);
            if tp.value(abs.0[2]) <= MIN_PROJECT_DEPTH {
                continue;
            }
            let proj = tape::project_on_tape(&mut tp, &abs);
            let kp = problem.keypoints.points[j];
            let dx = tp.add_const(proj[0], -kp[0]);
            let dy = tp.add_const(proj[1], -kp[1]);
            let sx = tp.square(dx);
            let sy = tp.square(dy);
            let s = tp.add(sx, sy);
            terms.push(tp.scale(s, w.lambda_2d * sigma));
        }
    }

    // 3D anchors.
    if w.lambda_3d != 0.0 {
        for (p, target) in positions.iter().zip(problem.targets_3d) {
            let abs = p.add(&mut tp, &t);
            let tgt = TVec3::constants(&mut tp, target);
            let d = abs.sub(&mut tp, &tgt);
            let s = d.norm_sq(&mut tp);
            terms.push(tp.scale(s, w.lambda_3d));
        }
    }

    // Robust prior toward the rest pose over articulated joints. The
    // squared geodesic angle is the squared axis-angle norm, so the penalty
    // needs no square root.
    if w.lambda_prior != 0.0 {
        let s2 = w.rho_scale * w.rho_scale;
        for aa in &aa_vars {
            let sq = aa.norm_sq(&mut tp);
            let denom = tp.add_const(sq, s2);
            let rho = tp.div(sq, denom);
            terms.push(tp.scale(rho, w.lambda_prior));
        }
    }

    // Exponential hinge limits.
    if w.lambda_angle != 0.0 {
        for hinge in &tree.hinges {
            let aa = &aa_vars[hinge.joint - 1];
            let axis = Vec3::new(hinge.axis[0], hinge.axis[1], hinge.axis[2]);
            let axis = TVec3::constants(&mut tp, &axis);
            let dot = aa.dot(&mut tp, &axis);
            let shifted = tp.add_const(dot, -hinge.limit);
            let scaled = tp.scale(shifted, hinge.sign);
            let e = tp.exp(scaled);
            terms.push(tp.scale(e, w.lambda_angle));
        }
    }

    // Mount orientation agreement.
    if w.lambda_ori != 0.0 {
        let mounts = tree.mounts.as_array();
        for (i, &joint) in mounts.iter().enumerate() {
            let f = rotations[joint]
                .frobenius_sq_to(&mut tp, problem.mount_targets[i].matrix());
            terms.push(tp.scale(f, w.lambda_ori));
        }
    }

    let total = tp.sum(&terms);
    let value = tp.value(total);
    let adj = tp.backward(total);
    let grad = vars.iter().map(|&v| Tape::grad(&adj, v)).collect();
    (value, grad)
}

/// Runs the configured number of quasi-Newton iterations from the given
/// estimate. The returned energy never exceeds the input energy.
pub fn refine(problem: &RefineProblem, pose: &Pose, t_c: &Vec3) -> Result<RefineOutcome> {
    if problem.keypoints.len() != JOINT_COUNT {
        return Err(Error::DimensionMismatch {
            expected: JOINT_COUNT,
            got: problem.keypoints.len(),
            context: "refinement keypoints",
        });
    }
    if problem.targets_3d.len() != JOINT_COUNT {
        return Err(Error::DimensionMismatch {
            expected: JOINT_COUNT,
            got: problem.targets_3d.len(),
            context: "refinement 3D targets",
        });
    }
    if pose.local.len() != JOINT_COUNT {
        return Err(Error::DimensionMismatch {
            expected: JOINT_COUNT,
            got: pose.local.len(),
            context: "refinement pose",
        });
    }
    let root = pose.local[0];
    let x0 = pack(pose, t_c);
    let (energy_before, _) = energy(problem, &root, &x0);
    let result: LbfgsResult = lbfgs_minimize(
        |x| energy(problem, &root, x),
        &x0,
        problem.weights.iterations,
        problem.weights.history,
    );
    let (pose_out, t_out) = unpack(&result.point, root);
    Ok(RefineOutcome {
        pose: pose_out,
        translation: t_out,
        energy_before,
        energy_after: result.value,
        line_search_failed: result.line_search_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project_z1, random_axis_angle, Calibration};
    use crate::skeleton::{fk, mount_rotations, KinematicTree};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn standing_pose() -> Pose {
        let mut pose = Pose::identity(JOINT_COUNT);
        pose.local[0] = Rotation::from_rotation_y(0.2);
        pose.local[crate::skeleton::joints::L_SHOULDER] = Rotation::from_rotation_z(-1.3);
        pose.local[crate::skeleton::joints::R_SHOULDER] = Rotation::from_rotation_z(1.3);
        pose
    }

    struct Scene {
        tree: KinematicTree,
        keypoints: KeypointFrame,
        targets: Vec<Vec3>,
        mounts: [Rotation; 6],
        pose: Pose,
        t_c: Vec3,
    }

    fn scene() -> Scene {
        let tree = KinematicTree::default_humanoid();
        let pose = standing_pose();
        let t_c = Vec3::new(0.1, 0.0, 3.0);
        let joints = fk(&tree, &pose);
        let mut points = Vec::new();
        let mut conf = Vec::new();
        let mut targets = Vec::new();
        for p in &joints.positions {
            let abs = p + t_c;
            points.push(project_z1(&abs).unwrap());
            conf.push(1.0);
            targets.push(abs);
        }
        let mounts = mount_rotations(&tree, &pose);
        Scene {
            tree,
            keypoints: KeypointFrame {
                points,
                confidences: conf,
            },
            targets,
            mounts,
            pose,
            t_c,
        }
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let s = scene();
        let weights = RefineWeights::default();
        let problem = RefineProblem {
            tree: &s.tree,
            weights: &weights,
            keypoints: &s.keypoints,
            targets_3d: &s.targets,
            mount_targets: &s.mounts,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut x = pack(&s.pose, &s.t_c);
        for v in x.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let root = s.pose.local[0];
        let (_, got) = energy(&problem, &root, &x);
        let h = 1e-6;
        let mut fd = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            fd.push((energy(&problem, &root, &xp).0 - energy(&problem, &root, &xm).0) / (2.0 * h));
        }
        let num: f64 = got
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = got.iter().zip(&fd).map(|(a, b)| a * a + b * b).sum::<f64>().sqrt();
        assert!(num / den < 1e-3, "rel err {}", num / den);
    }

    #[test]
    fn refinement_never_increases_energy() {
        let s = scene();
        let weights = RefineWeights::default();
        let problem = RefineProblem {
            tree: &s.tree,
            weights: &weights,
            keypoints: &s.keypoints,
            targets_3d: &s.targets,
            mount_targets: &s.mounts,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..40 {
            let mut pose = s.pose.clone();
            for j in 1..JOINT_COUNT {
                let angle = rng.random_range(0.0..0.25);
                let bump = random_axis_angle(&mut rng, angle);
                pose.local[j] = pose.local[j] * bump;
            }
            let t = s.t_c
                + Vec3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                );
            let out = refine(&problem, &pose, &t).unwrap();
            assert!(out.energy_after <= out.energy_before + 1e-12);
        }
    }

    #[test]
    fn perturbed_frames_move_back_toward_observations() {
        let s = scene();
        let weights = RefineWeights::default();
        let problem = RefineProblem {
            tree: &s.tree,
            weights: &weights,
            keypoints: &s.keypoints,
            targets_3d: &s.targets,
            mount_targets: &s.mounts,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let dir = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let t = s.t_c + 0.05 * dir;
            let out = refine(&problem, &s.pose, &t).unwrap();
            let before = (t - s.t_c).norm();
            let after = (out.translation - s.t_c).norm();
            assert!(
                after < before,
                "translation error went {before} -> {after}"
            );
            // The root orientation is not a variable.
            assert!(out.pose.local[0].frobenius_dist(&s.pose.local[0]) < 1e-15);
        }
    }

    #[test]
    fn orientation_term_ignores_joints_without_sensors() {
        let s = scene();
        let weights = RefineWeights {
            lambda_2d: 0.0,
            lambda_3d: 0.0,
            lambda_prior: 0.0,
            lambda_angle: 0.0,
            lambda_ori: 1.0,
            ..RefineWeights::default()
        };
        let problem = RefineProblem {
            tree: &s.tree,
            weights: &weights,
            keypoints: &s.keypoints,
            targets_3d: &s.targets,
            mount_targets: &s.mounts,
        };
        let root = s.pose.local[0];
        let x = pack(&s.pose, &s.t_c);
        let (base, _) = energy(&problem, &root, &x);
        let mut bent = s.pose.clone();
        bent.local[crate::skeleton::joints::L_WRIST] = Rotation::from_rotation_x(0.9);
        bent.local[crate::skeleton::joints::R_FOOT] = Rotation::from_rotation_y(-0.7);
        let xb = pack(&bent, &s.t_c);
        let (bent_e, _) = energy(&problem, &root, &xb);
        assert!((base - bent_e).abs() < 1e-12);
        // Bending an ancestor of a mount does change it.
        let mut elbowed = s.pose.clone();
        elbowed.local[crate::skeleton::joints::L_SHOULDER] =
            elbowed.local[crate::skeleton::joints::L_SHOULDER] * Rotation::from_rotation_x(0.5);
        let xe = pack(&elbowed, &s.t_c);
        let (elbow_e, _) = energy(&problem, &root, &xe);
        assert!(elbow_e > base + 1e-6);
    }

    #[test]
    fn behind_camera_joints_drop_out_of_the_reprojection_term() {
        let s = scene();
        let weights = RefineWeights {
            lambda_3d: 0.0,
            lambda_prior: 0.0,
            lambda_angle: 0.0,
            lambda_ori: 0.0,
            ..RefineWeights::default()
        };
        let problem = RefineProblem {
            tree: &s.tree,
            weights: &weights,
            keypoints: &s.keypoints,
            targets_3d: &s.targets,
            mount_targets: &s.mounts,
        };
        let root = s.pose.local[0];
        // Move the whole body behind the camera: every term drops, energy 0.
        let x = pack(&s.pose, &Vec3::new(0.0, 0.0, -5.0));
        let (e, g) = energy(&problem, &root, &x);
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hinge_terms_penalize_the_forbidden_side() {
        let s = scene();
        let weights = RefineWeights {
            lambda_2d: 0.0,
            lambda_3d: 0.0,
            lambda_prior: 0.0,
            lambda_ori: 0.0,
            lambda_angle: 1.0,
            ..RefineWeights::default()
        };
        let problem = RefineProblem {
            tree: &s.tree,
            weights: &weights,
            keypoints: &s.keypoints,
            targets_3d: &s.targets,
            mount_targets: &s.mounts,
        };
        let root = s.pose.local[0];
        let neutral = energy(&problem, &root, &pack(&s.pose, &s.t_c)).0;
        // Knee flexion (positive X) is allowed: the knee's penalty shrinks.
        let mut flexed = s.pose.clone();
        flexed.local[crate::skeleton::joints::L_KNEE] = Rotation::from_rotation_x(1.0);
        let e_flex = energy(&problem, &root, &pack(&flexed, &s.t_c)).0;
        assert!(e_flex < neutral);
        // Hyperextension blows the penalty up.
        let mut hyper = s.pose.clone();
        hyper.local[crate::skeleton::joints::L_KNEE] = Rotation::from_rotation_x(-1.0);
        let e_hyper = energy(&problem, &root, &pack(&hyper, &s.t_c)).0;
        assert!(e_hyper > neutral + 1.0, "hyper {e_hyper} vs neutral {neutral}");
    }
}
