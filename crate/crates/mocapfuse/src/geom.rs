//! Rotation representations, coordinate-frame transforms, calibration and
//! perspective normalization.
//!
//! Frames used throughout the crate:
//! * **global** — the inertial frame the IMUs report in (+Y up, gravity -Y);
//! * **camera** — origin at the camera center, +Z along the optical axis;
//!   related to global by the calibrated [`Calibration::imu_to_camera`]
//!   rotation (origins coincide);
//! * **root** — anchored to the pelvis, orientation taken from the pelvis IMU.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::sensors::{ImuFrame, KeypointFrame};
use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Minimum depth (meters) accepted by [`project_z1`].
pub const MIN_PROJECT_DEPTH: f64 = 0.05;

const ORTHO_TOL: f64 = 1e-9;

/// A 3x3 rotation matrix, the canonical rotation representation of the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal with det +1 (within 1e-9).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > 1e3 * ORTHO_TOL || (det - 1.0).abs() > 1e3 * ORTHO_TOL {
            return Err(Error::Precondition(format!(
                "matrix is not a rotation (orthogonality residual {ortho:.2e}, det {det:.6})"
            )));
        }
        Ok(Rotation(m))
    }

    /// Projects an arbitrary matrix to the nearest rotation (polar factor via
    /// SVD). Used when reading f32-quantized matrices back from disk.
    pub fn from_matrix_nearest(m: Matrix3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        d[(2, 2)] = (u * v_t).determinant().signum();
        let r = u * d * v_t;
        if !r.iter().all(|x| x.is_finite()) {
            return Err(Error::Precondition("non-finite matrix".into()));
        }
        Ok(Rotation(r))
    }

    pub fn from_axis_angle(scaled_axis: &Vec3) -> Self {
        Rotation(*nalgebra::Rotation3::from_scaled_axis(*scaled_axis).matrix())
    }

    /// Scaled-axis (axis * angle) representation, angle in [0, pi].
    pub fn to_axis_angle(&self) -> Vec3 {
        nalgebra::Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    pub fn from_rotation_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::new(angle, 0.0, 0.0))
    }

    pub fn from_rotation_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::new(0.0, angle, 0.0))
    }

    pub fn from_rotation_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::new(0.0, 0.0, angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic angle (radians) between `self` and `other`.
    pub fn geodesic_to(&self, other: &Rotation) -> f64 {
        let rel = self.0.transpose() * other.0;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn frobenius_dist(&self, other: &Rotation) -> f64 {
        (self.0 - other.0).norm()
    }

    /// Row-major flattening, the on-disk layout of every rotation in the crate.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::from_matrix_nearest(Matrix3::new(
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8],
        ))
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<&Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Uniformly random rotation (random unit axis, angle uniform in [0, pi)).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    random_axis_angle(rng, angle)
}

/// Random rotation of a fixed angle about a uniformly random axis.
pub fn random_axis_angle<R: Rng + ?Sized>(rng: &mut R, angle: f64) -> Rotation {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Rotation::from_axis_angle(&(v / n * angle));
        }
    }
}

/// First two columns of a rotation matrix, the continuous 6D representation
/// regressed by the rotation network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

/// First two columns of `r`, column-major pair.
pub fn rot_to_6d(r: &Rotation) -> Rot6D {
    let m = r.matrix();
    Rot6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

/// Gram-Schmidt orthonormalization of the two 6D columns; the third column is
/// their cross product.
pub fn rot_from_6d(d: &Rot6D) -> Result<Rotation> {
    let a1 = Vec3::new(d.0[0], d.0[1], d.0[2]);
    let a2 = Vec3::new(d.0[3], d.0[4], d.0[5]);
    let n1 = a1.norm();
    if n1 < 1e-8 {
        return Err(Error::DegenerateInput(format!("first column norm {n1:.2e}")));
    }
    let b1 = a1 / n1;
    let proj = a2 - b1 * b1.dot(&a2);
    let n2 = proj.norm();
    if n2 < 1e-8 {
        return Err(Error::DegenerateInput(format!(
            "columns parallel (residual norm {n2:.2e})"
        )));
    }
    let b2 = proj / n2;
    let b3 = b1.cross(&b2);
    Ok(Rotation(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Rigid transform between frames.
#[derive(Debug, Clone, Copy)]
pub struct FrameTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl FrameTransform {
    pub fn identity() -> Self {
        FrameTransform {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        FrameTransform {
            rotation,
            translation,
        }
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &FrameTransform) -> FrameTransform {
        FrameTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> FrameTransform {
        let inv_rot = self.rotation.inverse();
        FrameTransform {
            rotation: inv_rot,
            translation: -(inv_rot.apply(&self.translation)),
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.apply(v)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
        }
    }
}

/// Relative orientation between the IMU global frame and the camera frame,
/// plus the camera intrinsics.
#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub imu_to_camera: Rotation,
    pub intrinsics: Intrinsics,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            imu_to_camera: Rotation::identity(),
            intrinsics: Intrinsics::default(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    imu_to_camera: [f64; 9],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl Calibration {
    pub fn to_json(&self) -> String {
        let f = CalibrationFile {
            imu_to_camera: self.imu_to_camera.to_row_major(),
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
        };
        serde_json::to_string_pretty(&f).expect("calibration serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CalibrationFile = serde_json::from_str(s)?;
        Ok(Calibration {
            imu_to_camera: Rotation::from_row_major(&f.imu_to_camera)?,
            intrinsics: Intrinsics {
                fx: f.fx,
                fy: f.fy,
                cx: f.cx,
                cy: f.cy,
            },
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Rotates every orientation and acceleration into the pelvis (root) frame.
/// The root orientation of the output is identity by construction.
pub fn imu_to_root(frame_global: &ImuFrame) -> ImuFrame {
    let root_inv = frame_global.orientations[ImuFrame::ROOT].inverse();
    let mut out = frame_global.clone();
    for i in 0..ImuFrame::SENSOR_COUNT {
        out.orientations[i] = root_inv * frame_global.orientations[i];
        out.accelerations[i] = root_inv.apply(&frame_global.accelerations[i]);
    }
    // Snap the root entry exactly; the product above is identity only up to
    // rounding.
    out.orientations[ImuFrame::ROOT] = Rotation::identity();
    out.frame = crate::sensors::FrameTag::Root;
    out
}

/// Rotates every orientation and acceleration by the calibrated
/// global-to-camera rotation.
pub fn imu_to_camera(frame_global: &ImuFrame, calib: &Calibration) -> ImuFrame {
    let q = calib.imu_to_camera;
    let mut out = frame_global.clone();
    for i in 0..ImuFrame::SENSOR_COUNT {
        out.orientations[i] = q * frame_global.orientations[i];
        out.accelerations[i] = q.apply(&frame_global.accelerations[i]);
    }
    out.frame = crate::sensors::FrameTag::Camera;
    out
}

/// Maximum per-sensor residual accepted by [`calibrate_tpose`].
pub const CALIB_RESIDUAL_LIMIT_DEG: f64 = 10.0;

/// Single-frame orthogonal Procrustes alignment of measured global sensor
/// orientations to their known camera-frame orientations in a reference pose.
pub fn calibrate_tpose(
    tpose_imu: &ImuFrame,
    known_camera: &[Rotation],
    intrinsics: Intrinsics,
) -> Result<Calibration> {
    if known_camera.len() != ImuFrame::SENSOR_COUNT {
        return Err(Error::DimensionMismatch {
            expected: ImuFrame::SENSOR_COUNT,
            got: known_camera.len(),
            context: "calibrate_tpose reference orientations",
        });
    }
    // Q minimizing sum_i ||Q * meas_i - known_i||_F is the polar factor of
    // sum_i known_i * meas_i^T.
    let mut m = Matrix3::zeros();
    for (meas, known) in tpose_imu.orientations.iter().zip(known_camera) {
        m += known.matrix() * meas.matrix().transpose();
    }
    let q = Rotation::from_matrix_nearest(m)?;
    for (i, (meas, known)) in tpose_imu.orientations.iter().zip(known_camera).enumerate() {
        let residual = (q * *meas).geodesic_to(known).to_degrees();
        if residual > CALIB_RESIDUAL_LIMIT_DEG {
            return Err(Error::CalibrationFailure {
                sensor: i,
                residual_deg: residual,
                limit_deg: CALIB_RESIDUAL_LIMIT_DEG,
            });
        }
    }
    Ok(Calibration {
        imu_to_camera: q,
        intrinsics,
    })
}

/// Perspective projection onto the Z=1 plane.
pub fn project_z1(p: &Vec3) -> Result<[f64; 2]> {
    if p.z <= MIN_PROJECT_DEPTH {
        return Err(Error::BehindCamera(p.z));
    }
    Ok([p.x / p.z, p.y / p.z])
}

/// Pixel coordinates to Z=1-plane coordinates.
pub fn normalize_keypoints(pixels: &[[f64; 2]], calib: &Calibration) -> Vec<[f64; 2]> {
    let k = &calib.intrinsics;
    pixels
        .iter()
        .map(|[u, v]| [(u - k.cx) / k.fx, (v - k.cy) / k.fy])
        .collect()
}

/// Inverse of [`normalize_keypoints`].
pub fn apply_intrinsics(points: &[[f64; 2]], calib: &Calibration) -> Vec<[f64; 2]> {
    let k = &calib.intrinsics;
    points
        .iter()
        .map(|[x, y]| [x * k.fx + k.cx, y * k.fy + k.cy])
        .collect()
}

/// Result of [`root_normalize`]: root-relative offsets, the absolute root
/// position on the Z=1 plane, and the per-keypoint confidences, flattened as
/// `[(J'-1) x 2 offsets, root xy, J' confidences]` (total length `3 J'`).
#[derive(Debug, Clone)]
pub struct RootNormalized {
    pub vector: Vec<f64>,
    /// False when the root keypoint had zero confidence and the offsets were
    /// computed against the last known root position instead.
    pub root_valid: bool,
    /// The root position the offsets were computed against.
    pub root: [f64; 2],
}

/// Re-expresses a keypoint frame as root-relative offsets plus the absolute
/// root position. A zero-confidence root falls back to `last_root` so the
/// output stays well-formed during partial occlusion.
pub fn root_normalize(
    kps: &KeypointFrame,
    root_index: usize,
    last_root: Option<[f64; 2]>,
) -> RootNormalized {
    let n = kps.points.len();
    assert!(root_index < n, "root keypoint index out of range");
    let root_valid = kps.confidences[root_index] > 0.0;
    let root = if root_valid {
        kps.points[root_index]
    } else {
        last_root.unwrap_or([0.0, 0.0])
    };
    let mut vector = Vec::with_capacity(3 * n);
    for (i, p) in kps.points.iter().enumerate() {
        if i == root_index {
            continue;
        }
        vector.push(p[0] - root[0]);
        vector.push(p[1] - root[1]);
    }
    vector.push(root[0]);
    vector.push(root[1]);
    vector.extend_from_slice(&kps.confidences);
    RootNormalized {
        vector,
        root_valid,
        root,
    }
}
