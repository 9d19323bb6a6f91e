//! Kinematic tree, poses and forward kinematics.
//!
//! The default humanoid has 24 joints in the common body-model ordering
//! (pelvis root, legs, spine chain, arms). All joint rotations are local to
//! the parent; the root entry of a [`Pose`] carries the global orientation of
//! the pelvis in whichever frame the pose lives in.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geom::{Rotation, Vec3};
use crate::{Error, Result};

pub const JOINT_COUNT: usize = 24;

/// Named indices into the default humanoid.
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const SPINE1: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const SPINE2: usize = 6;
    pub const L_ANKLE: usize = 7;
    pub const R_ANKLE: usize = 8;
    pub const SPINE3: usize = 9;
    pub const L_FOOT: usize = 10;
    pub const R_FOOT: usize = 11;
    pub const NECK: usize = 12;
    pub const L_COLLAR: usize = 13;
    pub const R_COLLAR: usize = 14;
    pub const HEAD: usize = 15;
    pub const L_SHOULDER: usize = 16;
    pub const R_SHOULDER: usize = 17;
    pub const L_ELBOW: usize = 18;
    pub const R_ELBOW: usize = 19;
    pub const L_WRIST: usize = 20;
    pub const R_WRIST: usize = 21;
    pub const L_HAND: usize = 22;
    pub const R_HAND: usize = 23;
}

/// Joints the six IMUs are rigidly attached to, in sensor order
/// (left forearm, right forearm, left shank, right shank, head, pelvis).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Mounts {
    pub larm: usize,
    pub rarm: usize,
    pub lleg: usize,
    pub rleg: usize,
    pub head: usize,
    pub root: usize,
}

impl Mounts {
    pub fn as_array(&self) -> [usize; 6] {
        [
            self.larm, self.rarm, self.lleg, self.rleg, self.head, self.root,
        ]
    }
}

/// Soft joint-limit description: the penalty term grows as
/// `exp(sign * (dot(axis_angle, axis) - limit))` past the limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hinge {
    pub joint: usize,
    pub axis: [f64; 3],
    pub sign: f64,
    pub limit: f64,
}

/// Fixed skeleton topology: per-joint parent and rest offset from the parent.
#[derive(Debug, Clone)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    pub mounts: Mounts,
    pub feet: [usize; 2],
    pub hinges: Vec<Hinge>,
}

impl KinematicTree {
    /// Validates topology: exactly one root at index 0, parents strictly
    /// before children, indices in range.
    pub fn new(
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        mounts: Mounts,
        feet: [usize; 2],
        hinges: Vec<Hinge>,
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 || offsets.len() != n {
            return Err(Error::LengthMismatch(parents.len(), offsets.len()));
        }
        if parents[0].is_some() {
            return Err(Error::Precondition("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                Some(p) => {
                    return Err(Error::Precondition(format!(
                        "parent {p} of joint {j} is not topologically earlier"
                    )))
                }
                None => {
                    return Err(Error::Precondition(format!("joint {j} has no parent")));
                }
            }
        }
        for (check, what) in [
            (mounts.as_array().iter().all(|&m| m < n), "mount"),
            (feet.iter().all(|&f| f < n), "foot"),
            (hinges.iter().all(|h| h.joint < n), "hinge"),
        ] {
            if !check {
                return Err(Error::Precondition(format!("{what} index out of range")));
            }
        }
        if offsets.iter().any(|o| !o.iter().all(|x| x.is_finite())) {
            return Err(Error::Precondition("non-finite offset".into()));
        }
        Ok(KinematicTree {
            parents,
            offsets,
            mounts,
            feet,
            hinges,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn offset(&self, joint: usize) -> &Vec3 {
        &self.offsets[joint]
    }

    /// Standing human of roughly 1.7 m with the pelvis at the origin, +Y up,
    /// toes toward +Z. Rest pose is a T-pose (arms along +-X).
    pub fn default_humanoid() -> Self {
        use joints::*;
        let parent_table: [i64; JOINT_COUNT] = [
            -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
        ];
        let parents = parent_table
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let mut offsets = vec![Vec3::zeros(); JOINT_COUNT];
        offsets[L_HIP] = Vector3::new(0.09, -0.07, 0.0);
        offsets[R_HIP] = Vector3::new(-0.09, -0.07, 0.0);
        offsets[SPINE1] = Vector3::new(0.0, 0.11, 0.0);
        offsets[L_KNEE] = Vector3::new(0.0, -0.38, 0.0);
        offsets[R_KNEE] = Vector3::new(0.0, -0.38, 0.0);
        offsets[SPINE2] = Vector3::new(0.0, 0.13, 0.0);
        offsets[L_ANKLE] = Vector3::new(0.0, -0.40, 0.0);
        offsets[R_ANKLE] = Vector3::new(0.0, -0.40, 0.0);
        offsets[SPINE3] = Vector3::new(0.0, 0.06, 0.0);
        offsets[L_FOOT] = Vector3::new(0.0, -0.05, 0.13);
        offsets[R_FOOT] = Vector3::new(0.0, -0.05, 0.13);
        offsets[NECK] = Vector3::new(0.0, 0.21, 0.0);
        offsets[L_COLLAR] = Vector3::new(0.08, 0.02, 0.0);
        offsets[R_COLLAR] = Vector3::new(-0.08, 0.02, 0.0);
        offsets[HEAD] = Vector3::new(0.0, 0.08, 0.0);
        offsets[L_SHOULDER] = Vector3::new(0.10, 0.0, 0.0);
        offsets[R_SHOULDER] = Vector3::new(-0.10, 0.0, 0.0);
        offsets[L_ELBOW] = Vector3::new(0.26, 0.0, 0.0);
        offsets[R_ELBOW] = Vector3::new(-0.26, 0.0, 0.0);
        offsets[L_WRIST] = Vector3::new(0.25, 0.0, 0.0);
        offsets[R_WRIST] = Vector3::new(-0.25, 0.0, 0.0);
        offsets[L_HAND] = Vector3::new(0.08, 0.0, 0.0);
        offsets[R_HAND] = Vector3::new(-0.08, 0.0, 0.0);
        let mounts = Mounts {
            larm: L_ELBOW,
            rarm: R_ELBOW,
            lleg: L_KNEE,
            rleg: R_KNEE,
            head: HEAD,
            root: PELVIS,
        };
        // Knees flex about +X (positive), elbows about +X (negative);
        // the soft limits penalize the opposite direction past ~6 degrees.
        let hinges = vec![
            Hinge {
                joint: L_KNEE,
                axis: [1.0, 0.0, 0.0],
                sign: -1.0,
                limit: -0.1,
            },
            Hinge {
                joint: R_KNEE,
                axis: [1.0, 0.0, 0.0],
                sign: -1.0,
                limit: -0.1,
            },
            Hinge {
                joint: L_ELBOW,
                axis: [1.0, 0.0, 0.0],
                sign: 1.0,
                limit: 0.1,
            },
            Hinge {
                joint: R_ELBOW,
                axis: [1.0, 0.0, 0.0],
                sign: 1.0,
                limit: 0.1,
            },
        ];
        KinematicTree::new(parents, offsets, mounts, [L_FOOT, R_FOOT], hinges)
            .expect("default humanoid is well-formed")
    }

    pub fn to_json(&self) -> String {
        let f = SkeletonFile {
            parents: self
                .parents
                .iter()
                .map(|p| p.map(|p| p as i64).unwrap_or(-1))
                .collect(),
            offsets: self.offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
            mounts: self.mounts,
            feet: self.feet,
            hinges: self.hinges.clone(),
        };
        serde_json::to_string_pretty(&f).expect("skeleton serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: SkeletonFile = serde_json::from_str(s)?;
        let parents = f
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let offsets = f
            .offsets
            .iter()
            .map(|o| Vector3::new(o[0], o[1], o[2]))
            .collect();
        KinematicTree::new(parents, offsets, f.mounts, f.feet, f.hinges)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    parents: Vec<i64>,
    offsets: Vec<[f64; 3]>,
    mounts: Mounts,
    feet: [usize; 2],
    hinges: Vec<Hinge>,
}

/// Per-joint local rotations; entry 0 is the global root orientation.
#[derive(Debug, Clone)]
pub struct Pose {
    pub local: Vec<Rotation>,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Self {
        Pose {
            local: vec![Rotation::identity(); joint_count],
        }
    }

    pub fn from_axis_angles(aa: &[Vec3]) -> Self {
        Pose {
            local: aa.iter().map(Rotation::from_axis_angle).collect(),
        }
    }

    pub fn to_axis_angles(&self) -> Vec<Vec3> {
        self.local.iter().map(|r| r.to_axis_angle()).collect()
    }
}

/// Joint positions relative to the root (root at the origin).
#[derive(Debug, Clone)]
pub struct JointPositions {
    pub positions: Vec<Vec3>,
}

impl JointPositions {
    /// `[x0, y0, z0, x1, ...]`, length `3 J`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.positions.len());
        for p in &self.positions {
            out.extend_from_slice(&[p.x, p.y, p.z]);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::DimensionMismatch {
                expected: 3 * (flat.len() / 3 + 1),
                got: flat.len(),
                context: "flattened joint positions",
            });
        }
        Ok(JointPositions {
            positions: flat
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        })
    }

    /// Rotates every position by `r` (frame change of root-relative points).
    pub fn rotated(&self, r: &Rotation) -> JointPositions {
        JointPositions {
            positions: self.positions.iter().map(|p| r.apply(p)).collect(),
        }
    }
}

/// Forward kinematics: `pos(j) = pos(parent) + R_global(parent) * offset(j)`,
/// root at the origin.
pub fn fk(tree: &KinematicTree, pose: &Pose) -> JointPositions {
    let (positions, _) = fk_with_rotations(tree, pose);
    positions
}

/// Global (accumulated) rotation of every joint:
/// `R_global(j) = R_global(parent) * R_local(j)`.
pub fn global_rotations(tree: &KinematicTree, pose: &Pose) -> Vec<Rotation> {
    let (_, rotations) = fk_with_rotations(tree, pose);
    rotations
}

pub fn fk_with_rotations(tree: &KinematicTree, pose: &Pose) -> (JointPositions, Vec<Rotation>) {
    let n = tree.joint_count();
    assert_eq!(pose.local.len(), n, "pose joint count mismatch");
    let mut positions = vec![Vec3::zeros(); n];
    let mut rotations = vec![Rotation::identity(); n];
    rotations[0] = pose.local[0];
    for j in 1..n {
        let p = tree.parent(j).expect("non-root joint has a parent");
        positions[j] = positions[p] + rotations[p].apply(tree.offset(j));
        rotations[j] = rotations[p] * pose.local[j];
    }
    (JointPositions { positions }, rotations)
}

/// Global rotations at the six IMU mount joints, sensor order.
pub fn mount_rotations(tree: &KinematicTree, pose: &Pose) -> [Rotation; 6] {
    let rots = global_rotations(tree, pose);
    tree.mounts.as_array().map(|j| rots[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_bone_chain() -> KinematicTree {
        KinematicTree::new(
            vec![None, Some(0), Some(1)],
            vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            Mounts {
                larm: 0,
                rarm: 0,
                lleg: 0,
                rleg: 0,
                head: 0,
                root: 0,
            },
            [2, 2],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn fk_identity_accumulates_offsets() {
        let tree = two_bone_chain();
        let jp = fk(&tree, &Pose::identity(3));
        assert_relative_eq!(jp.positions[1], Vec3::new(0.0, 1.0, 0.0));
        assert_relative_eq!(jp.positions[2], Vec3::new(0.0, 2.0, 0.0));
    }

    #[test]
    fn fk_two_bone_rotated_root() {
        // Root yawed 90 degrees about Z carries both unit-Y bones onto -X.
        let tree = two_bone_chain();
        let mut pose = Pose::identity(3);
        pose.local[0] = Rotation::from_rotation_z(std::f64::consts::FRAC_PI_2);
        let jp = fk(&tree, &pose);
        assert_relative_eq!(jp.positions[2], Vec3::new(-2.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_mid_chain_rotation() {
        let tree = two_bone_chain();
        let mut pose = Pose::identity(3);
        pose.local[1] = Rotation::from_rotation_z(std::f64::consts::FRAC_PI_2);
        let jp = fk(&tree, &pose);
        // First bone unchanged, second bone bent onto -X from joint 1.
        assert_relative_eq!(jp.positions[1], Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(jp.positions[2], Vec3::new(-1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn default_humanoid_shape() {
        let tree = KinematicTree::default_humanoid();
        assert_eq!(tree.joint_count(), JOINT_COUNT);
        let jp = fk(&tree, &Pose::identity(JOINT_COUNT));
        // Feet below, head above; stature in a plausible human range.
        let foot_y = jp.positions[joints::L_FOOT].y;
        let head_y = jp.positions[joints::HEAD].y;
        assert!(foot_y < -0.8 && foot_y > -1.1, "foot at {foot_y}");
        assert!(head_y > 0.5 && head_y < 0.8, "head at {head_y}");
        // T-pose wrists out along +-X.
        assert!(jp.positions[joints::L_WRIST].x > 0.5);
        assert!(jp.positions[joints::R_WRIST].x < -0.5);
        // Left/right symmetry.
        assert_relative_eq!(
            jp.positions[joints::L_ANKLE].y,
            jp.positions[joints::R_ANKLE].y
        );
    }

    fn random_pose<R: Rng>(rng: &mut R, n: usize) -> Pose {
        Pose {
            local: (0..n).map(|_| crate::geom::random_rotation(rng)).collect(),
        }
    }

    /// Independent FK route: chain 4x4 homogeneous matrices
    /// `A_j = [R_local(j) | offset_j]` down the tree.
    fn fk_homogeneous(tree: &KinematicTree, pose: &Pose) -> Vec<Vec3> {
        let n = tree.joint_count();
        let mut t = vec![Matrix4::<f64>::identity(); n];
        for j in 0..n {
            let mut a = Matrix4::identity();
            a.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(pose.local[j].matrix());
            a.fixed_view_mut::<3, 1>(0, 3).copy_from(tree.offset(j));
            t[j] = match tree.parent(j) {
                Some(p) => t[p] * a,
                None => a,
            };
        }
        t.iter()
            .map(|m| Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]))
            .collect()
    }

    #[test]
    fn fk_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tree = KinematicTree::default_humanoid();
        for _ in 0..20 {
            let pose = random_pose(&mut rng, JOINT_COUNT);
            let fast = fk(&tree, &pose);
            let slow = fk_homogeneous(&tree, &pose);
            for j in 0..JOINT_COUNT {
                assert_relative_eq!(fast.positions[j], slow[j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn bone_lengths_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tree = KinematicTree::default_humanoid();
        let pose = random_pose(&mut rng, JOINT_COUNT);
        let jp = fk(&tree, &pose);
        for j in 1..JOINT_COUNT {
            let p = tree.parent(j).unwrap();
            let len = (jp.positions[j] - jp.positions[p]).norm();
            assert_relative_eq!(len, tree.offset(j).norm(), epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_topologies_rejected() {
        let m = Mounts {
            larm: 0,
            rarm: 0,
            lleg: 0,
            rleg: 0,
            head: 0,
            root: 0,
        };
        // Non-root joint 0.
        assert!(KinematicTree::new(
            vec![Some(0)],
            vec![Vec3::zeros()],
            m,
            [0, 0],
            vec![]
        )
        .is_err());
        // Forward reference.
        assert!(KinematicTree::new(
            vec![None, Some(2), Some(1)],
            vec![Vec3::zeros(); 3],
            m,
            [0, 0],
            vec![]
        )
        .is_err());
        // Mount out of range.
        let bad = Mounts {
            larm: 9,
            ..m
        };
        assert!(KinematicTree::new(
            vec![None, Some(0)],
            vec![Vec3::zeros(); 2],
            bad,
            [0, 0],
            vec![]
        )
        .is_err());
    }

    #[test]
    fn json_round_trip() {
        let tree = KinematicTree::default_humanoid();
        let back = KinematicTree::from_json(&tree.to_json()).unwrap();
        assert_eq!(back.joint_count(), tree.joint_count());
        assert_eq!(back.mounts, tree.mounts);
        assert_eq!(back.feet, tree.feet);
        assert_eq!(back.hinges.len(), tree.hinges.len());
        for j in 0..tree.joint_count() {
            assert_eq!(back.parent(j), tree.parent(j));
            assert_relative_eq!(back.offset(j), tree.offset(j), epsilon = 1e-12);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let tree = KinematicTree::default_humanoid();
        let jp = fk(&tree, &Pose::identity(JOINT_COUNT));
        let flat = jp.flatten();
        assert_eq!(flat.len(), 3 * JOINT_COUNT);
        let back = JointPositions::from_flat(&flat).unwrap();
        for (a, b) in back.positions.iter().zip(&jp.positions) {
            assert_relative_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn prop_global_rotation_composition(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = KinematicTree::default_humanoid();
            let pose = random_pose(&mut rng, JOINT_COUNT);
            let rots = global_rotations(&tree, &pose);
            for j in 1..JOINT_COUNT {
                let p = tree.parent(j).unwrap();
                let expect = rots[p] * pose.local[j];
                prop_assert!(rots[j].frobenius_dist(&expect) < 1e-12);
            }
        }

        #[test]
        fn prop_rotated_positions_isometric(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = KinematicTree::default_humanoid();
            let pose = random_pose(&mut rng, JOINT_COUNT);
            let jp = fk(&tree, &pose);
            let r = crate::geom::random_rotation(&mut rng);
            let rotated = jp.rotated(&r);
            for j in 1..JOINT_COUNT {
                let p = tree.parent(j).unwrap();
                let before = (jp.positions[j] - jp.positions[p]).norm();
                let after = (rotated.positions[j] - rotated.positions[p]).norm();
                prop_assert!((before - after).abs() < 1e-9);
            }
        }
    }
}
