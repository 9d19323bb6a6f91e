//! The online estimation pipeline: per-frame staging of the estimators,
//! translation filtering, refinement, and the two hidden-state feedback
//! paths, plus bundle persistence and training of a complete model set.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{AppConfig, FusionConfig};
use crate::estimator::{
    self, apply_gravity_velocity, complementary_fuse, estimate_contacts, estimate_joints_camera,
    estimate_joints_root, estimate_rotations, estimate_velocity, foot_velocity, fuse_joints,
    root_frame_pose, rotations_from_6d, select_velocity, FrameFlags, GravityState,
    MotionEstimate, IMU_DIM, KP_DIM, POS_DIM, ROT6D_DIM,
};
use crate::geom::{
    imu_to_camera, imu_to_root, project_z1, root_normalize, Calibration, Rotation, Vec3,
};
use crate::nn::checkpoint::{
    load_initializer, load_recurrent, save_initializer, save_recurrent,
};
use crate::nn::{
    train, Activation, InitializerNet, LossKind, NetRunner, RecurrentNet, TrainReport,
};
use crate::sensors::dataset::SequenceData;
use crate::sensors::{ImuFrame, KeypointFrame};
use crate::skeleton::{fk, joints, KinematicTree, Pose, JOINT_COUNT};
use crate::{Error, Result};

/// One frame of sensor input: a global-frame IMU set and detected 2D
/// keypoints.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub imu: ImuFrame,
    pub keypoints: KeypointFrame,
}

impl FrameInput {
    /// Frame stream of a stored sequence.
    pub fn sequence(seq: &SequenceData) -> Vec<FrameInput> {
        seq.imus
            .iter()
            .zip(&seq.keypoints)
            .map(|(imu, kp)| FrameInput {
                imu: imu.clone(),
                keypoints: kp.clone(),
            })
            .collect()
    }
}

/// A trained model set with everything needed to run the pipeline.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub p1: RecurrentNet,
    pub p2: RecurrentNet,
    pub p3: RecurrentNet,
    pub t1: RecurrentNet,
    pub t2: RecurrentNet,
    pub t3: RecurrentNet,
    pub initializer: InitializerNet,
    pub fusion: FusionConfig,
    pub calibration: Calibration,
    pub tree: KinematicTree,
    /// The rotation, contact, and velocity networks were trained on
    /// camera-frame inputs and the root-frame branch is skipped.
    pub camera_only: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct BundleManifest {
    camera_only: bool,
    fusion: FusionConfig,
}

impl ModelBundle {
    /// Freshly initialized networks with the configured shapes.
    pub fn untrained(
        cfg: &AppConfig,
        tree: KinematicTree,
        calibration: Calibration,
        camera_only: bool,
    ) -> Self {
        let n = &cfg.net;
        let hidden = n.hidden_size;
        let layers = n.layer_count;
        let s = n.seed;
        ModelBundle {
            p1: RecurrentNet::new(IMU_DIM, hidden, layers, POS_DIM, Activation::Linear, s),
            p2: RecurrentNet::new(
                IMU_DIM + KP_DIM,
                hidden,
                layers,
                POS_DIM,
                Activation::Linear,
                s.wrapping_add(1),
            ),
            p3: RecurrentNet::new(
                POS_DIM + IMU_DIM,
                hidden,
                layers,
                ROT6D_DIM,
                Activation::Linear,
                s.wrapping_add(2),
            ),
            t1: RecurrentNet::new(IMU_DIM, hidden, layers, 2, Activation::Sigmoid, s.wrapping_add(3)),
            t2: RecurrentNet::new(IMU_DIM, hidden, layers, 3, Activation::Linear, s.wrapping_add(4)),
            t3: RecurrentNet::new(
                IMU_DIM + 3 * JOINT_COUNT,
                hidden,
                layers,
                3,
                Activation::Linear,
                s.wrapping_add(5),
            ),
            initializer: InitializerNet::new(
                POS_DIM,
                n.initializer_hidden,
                layers * hidden,
                s.wrapping_add(6),
            ),
            fusion: cfg.fusion.clone(),
            calibration,
            tree,
            camera_only,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let nets = [
            ("p1", &self.p1),
            ("p2", &self.p2),
            ("p3", &self.p3),
            ("t1", &self.t1),
            ("t2", &self.t2),
            ("t3", &self.t3),
        ];
        for (name, net) in nets {
            save_recurrent(&dir.join(format!("{name}.net")), net, serde_json::Value::Null)?;
        }
        save_initializer(&dir.join("init.net"), &self.initializer, serde_json::Value::Null)?;
        let manifest = BundleManifest {
            camera_only: self.camera_only,
            fusion: self.fusion.clone(),
        };
        std::fs::write(
            dir.join("fusion.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        self.calibration.save(&dir.join("calibration.json"))?;
        self.tree.save(&dir.join("skeleton.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("fusion.json"))?)?;
        let load = |name: &str| -> Result<RecurrentNet> {
            Ok(load_recurrent(&dir.join(format!("{name}.net")))?.0)
        };
        Ok(ModelBundle {
            p1: load("p1")?,
            p2: load("p2")?,
            p3: load("p3")?,
            t1: load("t1")?,
            t2: load("t2")?,
            t3: load("t3")?,
            initializer: load_initializer(&dir.join("init.net"))?.0,
            fusion: manifest.fusion,
            calibration: Calibration::load(&dir.join("calibration.json"))?,
            tree: KinematicTree::load(&dir.join("skeleton.json"))?,
            camera_only: manifest.camera_only,
        })
    }
}

/// Keypoints synthesized from the current estimate for the translation
/// feedback: projected joints with full confidence, zero when behind the
/// camera.
pub fn feedback_keypoints(tree: &KinematicTree, theta_c: &Pose, t_c: &Vec3) -> KeypointFrame {
    let positions = fk(tree, theta_c).positions;
    let mut points = Vec::with_capacity(positions.len());
    let mut confidences = Vec::with_capacity(positions.len());
    for p in &positions {
        match project_z1(&(p + t_c)) {
            Ok(xy) => {
                points.push(xy);
                confidences.push(1.0);
            }
            Err(_) => {
                points.push([0.0, 0.0]);
                confidences.push(0.0);
            }
        }
    }
    KeypointFrame {
        points,
        confidences,
    }
}

/// Timing summary of a streamed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamStats {
    pub frames: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
}

/// Online estimator state. Every call to [`Pipeline::step`] consumes one
/// frame and advances each network's hidden state exactly once.
pub struct Pipeline {
    p1: NetRunner,
    p2: NetRunner,
    p3: NetRunner,
    t1: NetRunner,
    t2: NetRunner,
    t3: NetRunner,
    initializer: InitializerNet,
    pub fusion: FusionConfig,
    pub calibration: Calibration,
    pub tree: KinematicTree,
    pub camera_only: bool,
    /// Master switches, initialized from the fusion config.
    pub feedback_enabled: bool,
    pub refine_enabled: bool,

    frame_index: u64,
    prev_theta_r: Pose,
    prev_theta_c: Pose,
    prev_joints_camera: Option<Vec<Vec3>>,
    t_prev: Option<Vec3>,
    gravity: GravityState,
    last_root_kp: Option<[f64; 2]>,
    reliable: bool,
    frames_since_pose_reset: usize,
    /// Committed hidden-state advances of the translation network; exactly
    /// one per processed frame.
    pub t3_commits: u64,
}

impl Pipeline {
    pub fn new(bundle: ModelBundle) -> Self {
        let feedback_enabled = bundle.fusion.feedback.enabled;
        let refine_enabled = bundle.fusion.refine_enabled;
        Pipeline {
            p1: NetRunner::new(bundle.p1),
            p2: NetRunner::new(bundle.p2),
            p3: NetRunner::new(bundle.p3),
            t1: NetRunner::new(bundle.t1),
            t2: NetRunner::new(bundle.t2),
            t3: NetRunner::new(bundle.t3),
            initializer: bundle.initializer,
            fusion: bundle.fusion,
            calibration: bundle.calibration,
            tree: bundle.tree,
            camera_only: bundle.camera_only,
            feedback_enabled,
            refine_enabled,
            frame_index: 0,
            prev_theta_r: Pose::identity(JOINT_COUNT),
            prev_theta_c: Pose::identity(JOINT_COUNT),
            prev_joints_camera: None,
            t_prev: None,
            gravity: GravityState::default(),
            last_root_kp: None,
            reliable: false,
            frames_since_pose_reset: 0,
            t3_commits: 0,
        }
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    /// Resets all hidden state for a new stream.
    pub fn reset(&mut self) {
        self.p1.reset();
        self.p2.reset();
        self.p3.reset();
        self.t1.reset();
        self.t2.reset();
        self.t3.reset();
        self.frame_index = 0;
        self.prev_theta_r = Pose::identity(JOINT_COUNT);
        self.prev_theta_c = Pose::identity(JOINT_COUNT);
        self.prev_joints_camera = None;
        self.t_prev = None;
        self.gravity = GravityState::default();
        self.last_root_kp = None;
        self.reliable = false;
        self.frames_since_pose_reset = 0;
        self.t3_commits = 0;
    }

    /// Processes one frame.
    pub fn step(&mut self, input: &FrameInput, dt: f64) -> Result<MotionEstimate> {
        if input.keypoints.len() != JOINT_COUNT {
            return Err(Error::DimensionMismatch {
                expected: JOINT_COUNT,
                got: input.keypoints.len(),
                context: "pipeline keypoints",
            });
        }
        let cfg = self.fusion.clone();
        let mut flags = FrameFlags::default();

        // Frame transforms and keypoint conditioning.
        let x_r = imu_to_root(&input.imu);
        let x_c = imu_to_camera(&input.imu, &self.calibration);
        let sigma_mean = input.keypoints.sigma_mean();
        let rn = root_normalize(&input.keypoints, joints::PELVIS, self.last_root_kp);
        if rn.root_valid {
            self.last_root_kp = Some(rn.root);
        }
        let root_in_camera = x_c.orientations[ImuFrame::ROOT];

        // Position estimates in both frames, then rotations.
        let p_camera = estimate_joints_camera(&mut self.p2, &x_c, &rn.vector)?;
        let (fused_root, theta_r, theta_c) = if self.camera_only {
            let mut input_row = Vec::with_capacity(POS_DIM + IMU_DIM);
            for p in &p_camera {
                input_row.extend_from_slice(&[p.x, p.y, p.z]);
            }
            input_row.extend_from_slice(&x_c.flatten());
            let raw = self.p3.step(&input_row)?;
            let (_, pose_cam, fell_back) = rotations_from_6d(&raw, &self.prev_theta_c)?;
            flags.rotation_fallback = fell_back;
            let mut theta_c = pose_cam;
            theta_c.local[0] = root_in_camera;
            let theta_r = root_frame_pose(&theta_c);
            let inv = root_in_camera.inverse();
            let fused: Vec<Vec3> = p_camera.iter().map(|p| inv.apply(p)).collect();
            (fused, theta_r, theta_c)
        } else {
            let p_root = estimate_joints_root(&mut self.p1, &x_r)?;
            let fused = fuse_joints(
                &p_root,
                &p_camera,
                &root_in_camera,
                sigma_mean,
                cfg.sigma_lower,
                cfg.sigma_upper,
            )?;
            let (_, theta_r, fell_back) =
                estimate_rotations(&mut self.p3, &fused, &x_r, &self.prev_theta_r)?;
            flags.rotation_fallback = fell_back;
            let mut theta_c = theta_r.clone();
            theta_c.local[0] = root_in_camera;
            (fused, theta_r, theta_c)
        };
        let mut theta_r = theta_r;
        let mut theta_c = theta_c;
        let mut joints_camera = fk(&self.tree, &theta_c).positions;

        // Contacts and velocities.
        let contact_input = if self.camera_only { &x_c } else { &x_r };
        let contacts = estimate_contacts(&mut self.t1, contact_input)?;
        let v_net_camera = if self.camera_only {
            estimate_velocity(&mut self.t2, &x_c)?
        } else {
            let v_root = estimate_velocity(&mut self.t2, &x_r)?;
            root_in_camera.apply(&v_root)
        };
        let v_feet = match &self.prev_joints_camera {
            Some(prev) => [
                foot_velocity(prev, &joints_camera, self.tree.feet[0], dt),
                foot_velocity(prev, &joints_camera, self.tree.feet[1], dt),
            ],
            None => [Vec3::zeros(), Vec3::zeros()],
        };
        let v_selected = select_velocity(contacts, cfg.contact_threshold, v_net_camera, v_feet);

        // Translation observation; when the translation feedback will fire
        // at the end of this frame, the network's committed advance is the
        // feedback run, so this pass must not move the hidden state.
        let translation_feedback_pending =
            self.feedback_enabled && sigma_mean < cfg.feedback.translation_sigma;
        let t3_input = estimator::translation_input(&x_c, &input.keypoints)?;
        let t_obs_raw = if translation_feedback_pending {
            self.t3.peek(&t3_input)?
        } else {
            let y = self.t3.step(&t3_input)?;
            self.t3_commits += 1;
            y
        };
        let t_obs = Vec3::new(t_obs_raw[0], t_obs_raw[1], t_obs_raw[2]);

        // Translation update, gravity, and the floor.
        let mut t_c = match self.t_prev {
            None => {
                if sigma_mean >= cfg.sigma_lower {
                    t_obs
                } else {
                    Vec3::new(
                        cfg.default_translation[0],
                        cfg.default_translation[1],
                        cfg.default_translation[2],
                    )
                }
            }
            Some(t_prev) => complementary_fuse(
                t_prev,
                v_selected,
                dt,
                t_obs,
                sigma_mean,
                cfg.alpha_gain,
                cfg.scale_velocity_by_alpha,
            ),
        };
        let max_contact = contacts[0].max(contacts[1]);
        t_c = apply_gravity_velocity(
            t_c,
            max_contact,
            cfg.contact_threshold,
            dt,
            &mut self.gravity,
            &joints_camera,
            &self.calibration,
            cfg.gravity_rate,
            cfg.terminal_velocity,
        );

        // Refinement.
        if self.refine_enabled {
            let to_camera = root_in_camera;
            let targets: Vec<Vec3> = fused_root
                .iter()
                .map(|p| to_camera.apply(p) + t_c)
                .collect();
            let mounts = x_c.orientations;
            let problem = crate::refine::RefineProblem {
                tree: &self.tree,
                weights: &cfg.refine,
                keypoints: &input.keypoints,
                targets_3d: &targets,
                mount_targets: &mounts,
            };
            let out = crate::refine::refine(&problem, &theta_c, &t_c)?;
            flags.line_search_failed = out.line_search_failed;
            theta_c = out.pose;
            t_c = out.translation;
            theta_r = root_frame_pose(&theta_c);
            joints_camera = fk(&self.tree, &theta_c).positions;
        }

        // Hidden-state feedback. The two gates are mutually exclusive by
        // construction of the thresholds.
        if self.feedback_enabled && !self.camera_only {
            let fb = &cfg.feedback;
            if sigma_mean >= fb.pose_sigma {
                let due = fb.continuous
                    || !self.reliable
                    || self.frames_since_pose_reset >= fb.reliable_interval;
                if due {
                    let inv = root_in_camera.inverse();
                    let mut obs = Vec::with_capacity(POS_DIM);
                    for p in &p_camera {
                        let r = inv.apply(p);
                        obs.extend_from_slice(&[r.x, r.y, r.z]);
                    }
                    let h = self.initializer.hidden_for(&obs, &self.p1.net)?;
                    self.p1.set_hidden(h)?;
                    flags.pose_feedback = true;
                    self.frames_since_pose_reset = 0;
                }
            }
        }
        if translation_feedback_pending {
            let synth = feedback_keypoints(&self.tree, &theta_c, &t_c);
            let replay = estimator::translation_input(&x_c, &synth)?;
            let _ = self.t3.step(&replay)?;
            self.t3_commits += 1;
            flags.translation_feedback = true;
        }
        if !flags.pose_feedback {
            self.frames_since_pose_reset += 1;
        }
        self.reliable = sigma_mean >= cfg.feedback.pose_sigma;

        // Persist per-frame state.
        self.prev_theta_r = theta_r.clone();
        self.prev_theta_c = theta_c.clone();
        self.prev_joints_camera = Some(joints_camera.clone());
        self.t_prev = Some(t_c);
        self.frame_index += 1;

        Ok(MotionEstimate {
            theta_r,
            theta_c,
            joints_root: fused_root,
            joints_camera,
            t_c,
            contacts,
            sigma_mean,
            flags,
        })
    }

    /// Runs a full input stream, timing each frame.
    pub fn run_stream(
        &mut self,
        inputs: &[FrameInput],
        dt: f64,
    ) -> Result<(Vec<MotionEstimate>, StreamStats)> {
        let mut out = Vec::with_capacity(inputs.len());
        let mut total = 0.0f64;
        let mut max = 0.0f64;
        for input in inputs {
            let start = Instant::now();
            out.push(self.step(input, dt)?);
            let ms = start.elapsed().as_secs_f64() * 1e3;
            total += ms;
            max = max.max(ms);
        }
        let stats = StreamStats {
            frames: inputs.len(),
            mean_ms: if inputs.is_empty() {
                0.0
            } else {
                total / inputs.len() as f64
            },
            max_ms: max,
        };
        Ok((out, stats))
    }
}

/// Trains every network of a bundle on a stored corpus and returns the
/// bundle with per-network loss curves, keyed by network name.
pub fn train_bundle(
    corpus: &[SequenceData],
    cfg: &AppConfig,
    tree: KinematicTree,
    calibration: Calibration,
    camera_only: bool,
) -> Result<(ModelBundle, Vec<(String, TrainReport)>)> {
    let mut bundle = ModelBundle::untrained(cfg, tree, calibration, camera_only);
    let tcfg = &cfg.train;
    let calib = &bundle.calibration;
    let tree = bundle.tree.clone();
    let mut reports = Vec::new();

    if !camera_only {
        let data = estimator::assemble_pose_root(corpus, &tree, calib);
        let report = train(
            &mut bundle.p1,
            Some(&mut bundle.initializer),
            &data,
            &LossKind::MeanSquared,
            tcfg,
        )?;
        reports.push(("p1".to_string(), report));
    }

    let data = estimator::assemble_pose_camera(corpus, &tree, calib);
    let report = train(&mut bundle.p2, None, &data, &LossKind::MeanSquared, tcfg)?;
    reports.push(("p2".to_string(), report));

    let rot_loss = LossKind::RotationFk {
        tree: tree.clone(),
        lambda_rot: 1.0,
        lambda_pos: 100.0,
    };
    let data = if camera_only {
        estimator::assemble_rotation_camera(corpus, &tree, calib, 0.01, tcfg.seed ^ 0x5f3)
    } else {
        estimator::assemble_rotation(corpus, &tree, calib, 0.01, tcfg.seed ^ 0x5f3)
    };
    let report = train(&mut bundle.p3, None, &data, &rot_loss, tcfg)?;
    reports.push(("p3".to_string(), report));

    let data = estimator::assemble_contacts(corpus, &tree, calib, camera_only);
    let report = train(
        &mut bundle.t1,
        None,
        &data,
        &LossKind::BinaryCrossEntropy,
        tcfg,
    )?;
    reports.push(("t1".to_string(), report));

    let data = estimator::assemble_velocity(corpus, calib, camera_only);
    let report = train(&mut bundle.t2, None, &data, &LossKind::MeanSquared, tcfg)?;
    reports.push(("t2".to_string(), report));

    let data = estimator::assemble_translation(corpus, calib)?;
    let report = train(&mut bundle.t3, None, &data, &LossKind::MeanSquared, tcfg)?;
    reports.push(("t3".to_string(), report));

    Ok((bundle, reports))
}
