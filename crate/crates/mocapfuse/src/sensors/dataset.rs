//! On-disk sequence format: one directory per sequence holding
//! `motion.json` (ground truth), `imu.bin`, `kp.bin` and `scenario.json`.
//!
//! Binary files are little-endian f32, frame-major. `imu.bin` stores
//! 6 x (3 acceleration + 9 row-major rotation) per frame; `kp.bin` stores
//! J' x (2 position + 1 confidence) per frame.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{FrameTag, ImuFrame, KeypointFrame, MotionClip, Scenario};
use crate::geom::{Rotation, Vec3};
use crate::skeleton::Pose;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct MotionFile {
    frame_rate: f64,
    /// Per frame, per joint axis-angle triples.
    poses: Vec<Vec<[f64; 3]>>,
    root_translations: Vec<[f64; 3]>,
}

pub fn write_motion_json(path: &Path, clip: &MotionClip) -> Result<()> {
    let f = MotionFile {
        frame_rate: clip.frame_rate,
        poses: clip
            .poses
            .iter()
            .map(|p| {
                p.to_axis_angles()
                    .iter()
                    .map(|a| [a.x, a.y, a.z])
                    .collect()
            })
            .collect(),
        root_translations: clip
            .root_translations
            .iter()
            .map(|t| [t.x, t.y, t.z])
            .collect(),
    };
    std::fs::write(path, serde_json::to_string(&f)?)?;
    Ok(())
}

pub fn read_motion_json(path: &Path) -> Result<MotionClip> {
    let f: MotionFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if f.poses.len() != f.root_translations.len() {
        return Err(Error::LengthMismatch(
            f.poses.len(),
            f.root_translations.len(),
        ));
    }
    Ok(MotionClip {
        frame_rate: f.frame_rate,
        poses: f
            .poses
            .iter()
            .map(|frame| {
                Pose::from_axis_angles(
                    &frame
                        .iter()
                        .map(|a| Vec3::new(a[0], a[1], a[2]))
                        .collect::<Vec<_>>(),
                )
            })
            .collect(),
        root_translations: f
            .root_translations
            .iter()
            .map(|t| Vec3::new(t[0], t[1], t[2]))
            .collect(),
    })
}

pub fn write_imu_bin(path: &Path, frames: &[ImuFrame]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for frame in frames {
        for i in 0..ImuFrame::SENSOR_COUNT {
            let a = &frame.accelerations[i];
            for v in [a.x, a.y, a.z] {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
            for v in frame.orientations[i].to_row_major() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_imu_bin(path: &Path) -> Result<Vec<ImuFrame>> {
    let bytes = std::fs::read(path)?;
    let frame_bytes = ImuFrame::SENSOR_COUNT * 12 * 4;
    if bytes.len() % frame_bytes != 0 {
        return Err(Error::Format(format!(
            "imu.bin length {} is not a multiple of the {frame_bytes}-byte frame",
            bytes.len()
        )));
    }
    let mut r = std::io::Cursor::new(bytes);
    let n = r.get_ref().len() / frame_bytes;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut frame = ImuFrame::stationary(FrameTag::Global);
        for i in 0..ImuFrame::SENSOR_COUNT {
            let mut a = [0.0f64; 3];
            for v in a.iter_mut() {
                *v = r.read_f32::<LittleEndian>()? as f64;
            }
            frame.accelerations[i] = Vec3::new(a[0], a[1], a[2]);
            let mut m = [0.0f64; 9];
            for v in m.iter_mut() {
                *v = r.read_f32::<LittleEndian>()? as f64;
            }
            // f32 quantization breaks exact orthonormality; snap back.
            frame.orientations[i] = Rotation::from_row_major(&m)?;
        }
        out.push(frame);
    }
    Ok(out)
}

pub fn write_kp_bin(path: &Path, frames: &[KeypointFrame]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for frame in frames {
        for (p, c) in frame.points.iter().zip(&frame.confidences) {
            w.write_f32::<LittleEndian>(p[0] as f32)?;
            w.write_f32::<LittleEndian>(p[1] as f32)?;
            w.write_f32::<LittleEndian>(*c as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_kp_bin(path: &Path, joint_count: usize) -> Result<Vec<KeypointFrame>> {
    let bytes = std::fs::read(path)?;
    let frame_bytes = joint_count * 3 * 4;
    if frame_bytes == 0 || bytes.len() % frame_bytes != 0 {
        return Err(Error::Format(format!(
            "kp.bin length {} does not divide into {joint_count}-joint frames",
            bytes.len()
        )));
    }
    let mut r = std::io::Cursor::new(bytes);
    let n = r.get_ref().len() / frame_bytes;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut frame = KeypointFrame::uniform(joint_count, 0.0);
        for i in 0..joint_count {
            frame.points[i] = [
                r.read_f32::<LittleEndian>()? as f64,
                r.read_f32::<LittleEndian>()? as f64,
            ];
            frame.confidences[i] = (r.read_f32::<LittleEndian>()? as f64).clamp(0.0, 1.0);
        }
        out.push(frame);
    }
    Ok(out)
}

/// Everything stored for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub clip: MotionClip,
    pub imus: Vec<ImuFrame>,
    pub keypoints: Vec<KeypointFrame>,
    pub scenario: Scenario,
}

pub fn write_sequence(dir: &Path, seq: &SequenceData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_motion_json(&dir.join("motion.json"), &seq.clip)?;
    write_imu_bin(&dir.join("imu.bin"), &seq.imus)?;
    write_kp_bin(&dir.join("kp.bin"), &seq.keypoints)?;
    std::fs::write(
        dir.join("scenario.json"),
        serde_json::to_string_pretty(&seq.scenario)?,
    )?;
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<SequenceData> {
    let clip = read_motion_json(&dir.join("motion.json"))?;
    let joint_count = clip
        .poses
        .first()
        .map(|p| p.local.len())
        .ok_or_else(|| Error::Format("motion.json holds no frames".into()))?;
    let imus = read_imu_bin(&dir.join("imu.bin"))?;
    let keypoints = read_kp_bin(&dir.join("kp.bin"), joint_count)?;
    if imus.len() != clip.len() || keypoints.len() != clip.len() {
        return Err(Error::LengthMismatch(imus.len(), clip.len()));
    }
    let scenario: Scenario =
        serde_json::from_str(&std::fs::read_to_string(dir.join("scenario.json"))?)?;
    Ok(SequenceData {
        clip,
        imus,
        keypoints,
        scenario,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Calibration;
    use crate::sensors::procedural::{generate, MotionKind};
    use crate::sensors::{synthesize_imus, synthesize_keypoints};
    use crate::skeleton::KinematicTree;

    #[test]
    fn sequence_round_trip() {
        let tree = KinematicTree::default_humanoid();
        let clip = generate(MotionKind::Idle, 17, &tree);
        let imus = synthesize_imus(&clip, &tree);
        let keypoints = synthesize_keypoints(&clip, &tree, &Calibration::default(), None);
        let seq = SequenceData {
            clip,
            imus,
            keypoints,
            scenario: Scenario::clean("idle"),
        };
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(back.clip.len(), seq.clip.len());
        assert_eq!(back.scenario.name, "idle");
        // f32 round trip: everything within single precision.
        for k in [0, seq.clip.len() - 1] {
            for i in 0..6 {
                let da = (back.imus[k].accelerations[i] - seq.imus[k].accelerations[i]).norm();
                assert!(da < 1e-4, "acceleration error {da}");
                let dr = back.imus[k].orientations[i]
                    .frobenius_dist(&seq.imus[k].orientations[i]);
                assert!(dr < 1e-5, "orientation error {dr}");
            }
            for j in 0..seq.keypoints[k].len() {
                let dp = (back.keypoints[k].points[j][0] - seq.keypoints[k].points[j][0]).abs();
                assert!(dp < 1e-6);
            }
        }
        // Ground truth survives (f64 JSON).
        for k in 0..seq.clip.len() {
            let d = (back.clip.root_translations[k] - seq.clip.root_translations[k]).norm();
            assert!(d < 1e-12);
        }
        // Read-back rotations are valid rotations despite f32 quantization.
        let r = back.imus[0].orientations[0].matrix();
        let ortho = (r.transpose() * r - nalgebra::Matrix3::identity()).norm();
        assert!(ortho < 1e-12);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let imu = dir.path().join("imu.bin");
        std::fs::write(&imu, [0u8; 13]).unwrap();
        assert!(matches!(read_imu_bin(&imu), Err(Error::Format(_))));
        let kp = dir.path().join("kp.bin");
        std::fs::write(&kp, [0u8; 10]).unwrap();
        assert!(matches!(read_kp_bin(&kp, 24), Err(Error::Format(_))));
        assert!(read_sequence(dir.path()).is_err());
    }
}
