//! Skeleton model, forward kinematics, synthetic motion and flip augmentation.
//!
//! The skeleton is a rooted tree: joint 0 is the root and every other joint
//! hangs off its parent by a fixed-length bone with a rest direction. Poses
//! come from per-joint rotations composed down the tree. The synthetic
//! generator drives those rotations with seeded low-frequency sinusoids and
//! films the result with a fixed pinhole camera 4-6m away, which yields
//! perfectly labeled (2D pixels, root-relative 3D millimeters) sequence
//! records.

pub mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Camera used by the synthetic generator.
pub const GEN_CAMERA: Camera = Camera { fx: 1145.0, fy: 1145.0, cx: 500.0, cy: 500.0 };

/// Principal point assumed when a record carries no intrinsics (the
/// generator's image center); used only for input normalization and flips.
pub const DEFAULT_PRINCIPAL: (f64, f64) = (500.0, 500.0);

/// Generated pixel coordinates are snapped to this grid (2^-32 px). Values
/// on the grid reflect exactly about the generator's principal point
/// (`2*cx - x` stays on the grid and below 2^10 in magnitude, so it is
/// representable), which makes flip augmentation a bit-exact involution.
const PIXEL_GRID: f64 = 4294967296.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("joint {joint}: rotation matrix is not orthonormal (max deviation {dev:.3e})")]
    NonOrthonormalRotation { joint: usize, dev: f64 },
    #[error("point {index}: degenerate depth {z}mm (projection requires Z > 1mm)")]
    DegenerateDepth { index: usize, z: f64 },
    #[error("skeleton: {0}")]
    Skeleton(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── 3x3 rotation helpers (row-major) ──────────────────────────────────────

pub type Mat3 = [f64; 9];

pub const MAT3_IDENTITY: Mat3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c]
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c]
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] =
                a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
        }
    }
    out
}

pub fn mat3_apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

fn orthonormality_deviation(m: &Mat3) -> f64 {
    // max |R^T R - I|
    let mut dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot = m[i] * m[j] + m[3 + i] * m[3 + j] + m[6 + i] * m[6 + j];
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((dot - target).abs());
        }
    }
    dev
}

// ── camera and projection ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole projection of camera-space points (absolute depth, millimeters)
/// to pixels: `u = fx*X/Z + cx`, `v = fy*Y/Z + cy`.
pub fn project(points: &[[f64; 3]], camera: &Camera) -> Result<Vec<[f64; 2]>, DataError> {
    assert!(camera.fx > 0.0 && camera.fy > 0.0, "project: nonpositive focal length");
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p[2] <= 1.0 {
                return Err(DataError::DegenerateDepth { index, z: p[2] });
            }
            Ok([
                camera.fx * p[0] / p[2] + camera.cx,
                camera.fy * p[1] / p[2] + camera.cy,
            ])
        })
        .collect()
}

// ── skeleton ──────────────────────────────────────────────────────────────

/// Rooted kinematic tree. Coordinates follow the camera convention:
/// x right, y down, z away from the camera, so a standing person's head has
/// a smaller y than their feet and the subject's left side sits at
/// positive x when facing the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    /// parent[0] = -1; parent[j] < j for all other joints.
    pub parent: Vec<isize>,
    /// (left-index, right-index) mirror pairs.
    pub left_right_pairs: Vec<(usize, usize)>,
    /// Bone length from parent[j] to j; root entry 0.
    pub bone_length_mm: Vec<f64>,
    /// Unit rest direction of each bone in the parent frame; root entry unused.
    pub rest_dir: Vec<[f64; 3]>,
}

impl Skeleton {
    pub fn new(
        parent: Vec<isize>,
        left_right_pairs: Vec<(usize, usize)>,
        bone_length_mm: Vec<f64>,
        rest_dir: Vec<[f64; 3]>,
    ) -> Result<Self, DataError> {
        let s = Self { parent, left_right_pairs, bone_length_mm, rest_dir };
        s.validate()?;
        Ok(s)
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    fn validate(&self) -> Result<(), DataError> {
        let j = self.parent.len();
        let fail = |msg: String| Err(DataError::Skeleton(msg));
        if j == 0 {
            return fail("empty joint list".into());
        }
        if self.bone_length_mm.len() != j || self.rest_dir.len() != j {
            return fail(format!(
                "field lengths disagree: parent {j}, bones {}, dirs {}",
                self.bone_length_mm.len(),
                self.rest_dir.len()
            ));
        }
        if self.parent[0] != -1 {
            return fail(format!("joint 0 must be the root (parent -1), got {}", self.parent[0]));
        }
        for (idx, &p) in self.parent.iter().enumerate().skip(1) {
            // parent[j] < j makes index order a tree traversal and rules out cycles.
            if p < 0 || p as usize >= idx {
                return fail(format!("joint {idx}: parent {p} must satisfy 0 <= parent < {idx}"));
            }
            if self.bone_length_mm[idx] <= 0.0 {
                return fail(format!(
                    "joint {idx}: bone length {} must be positive",
                    self.bone_length_mm[idx]
                ));
            }
            let d = self.rest_dir[idx];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return fail(format!("joint {idx}: rest direction norm {norm} is not 1"));
            }
        }
        let mut seen = vec![false; j];
        for &(l, r) in &self.left_right_pairs {
            if l >= j || r >= j || l == r {
                return fail(format!("invalid mirror pair ({l},{r})"));
            }
            if seen[l] || seen[r] {
                return fail(format!("joint in more than one mirror pair: ({l},{r})"));
            }
            seen[l] = true;
            seen[r] = true;
        }
        Ok(())
    }

    /// Standard 17-joint layout: pelvis(0), right leg 1-3, left leg 4-6,
    /// spine/thorax/neck/head 7-10, left arm 11-13, right arm 14-16.
    /// Bone lengths follow a 1700mm-tall reference body.
    pub fn h36m17() -> Self {
        let parent = vec![-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
        let left_right_pairs = vec![(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)];
        let bone_length_mm = vec![
            0.0, // pelvis
            130.0, 450.0, 445.0, // right hip, knee, ankle
            130.0, 450.0, 445.0, // left hip, knee, ankle
            230.0, 255.0, 115.0, 115.0, // spine, thorax, neck, head
            170.0, 280.0, 250.0, // left shoulder, elbow, wrist
            170.0, 280.0, 250.0, // right shoulder, elbow, wrist
        ];
        let dn: [f64; 3] = [0.0, 1.0, 0.0]; // down
        let up: [f64; 3] = [0.0, -1.0, 0.0];
        let lf: [f64; 3] = [1.0, 0.0, 0.0]; // subject's left
        let rt: [f64; 3] = [-1.0, 0.0, 0.0];
        let rest_dir = vec![
            dn, // root (unused)
            rt, dn, dn, // right leg
            lf, dn, dn, // left leg
            up, up, up, up, // spine chain
            lf, dn, dn, // left arm (A-pose, hanging)
            rt, dn, dn, // right arm
        ];
        Self::new(parent, left_right_pairs, bone_length_mm, rest_dir)
            .expect("built-in 17-joint layout is valid")
    }

    /// Unbranched spine of `joints` equal bones with no mirror pairs, the
    /// minimal tree for experiments that should not benefit from body
    /// structure. Horizontal flips reduce to negating x.
    pub fn chain(joints: usize, bone_mm: f64) -> Self {
        assert!(joints >= 2, "a chain needs at least 2 joints, got {joints}");
        assert!(bone_mm > 0.0, "bone length must be positive, got {bone_mm}");
        let parent: Vec<isize> = std::iter::once(-1).chain(0..joints as isize - 1).collect();
        let mut bones = vec![bone_mm; joints];
        bones[0] = 0.0;
        // Alternating directions keep the chain folded instead of a straight
        // line, so projected 2D inputs stay informative.
        let rest_dir: Vec<[f64; 3]> = (0..joints)
            .map(|i| if i % 2 == 0 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] })
            .collect();
        Self::new(parent, vec![], bones, rest_dir).expect("chain layout is valid")
    }
}

/// Composes per-joint rotations down the tree: each joint sits at its
/// parent's position plus the parent's global rotation applied to the rest
/// bone vector; a joint's own rotation only affects its descendants. The
/// returned positions are absolute, with the root placed at `root_pos`.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    joint_rotations: &[Mat3],
    root_pos: [f64; 3],
) -> Result<Vec<[f64; 3]>, DataError> {
    let j = skeleton.joint_count();
    assert_eq!(
        joint_rotations.len(),
        j,
        "forward_kinematics: {} rotations for {} joints",
        joint_rotations.len(),
        j
    );
    for (joint, r) in joint_rotations.iter().enumerate() {
        let dev = orthonormality_deviation(r);
        if dev > 1e-9 {
            return Err(DataError::NonOrthonormalRotation { joint, dev });
        }
    }
    let mut global = vec![MAT3_IDENTITY; j];
    let mut pos = vec![[0.0; 3]; j];
    global[0] = joint_rotations[0];
    pos[0] = root_pos;
    for idx in 1..j {
        let p = skeleton.parent[idx] as usize;
        let d = skeleton.rest_dir[idx];
        let len = skeleton.bone_length_mm[idx];
        let bone = mat3_apply(&global[p], [d[0] * len, d[1] * len, d[2] * len]);
        pos[idx] = [pos[p][0] + bone[0], pos[p][1] + bone[1], pos[p][2] + bone[2]];
        global[idx] = mat3_mul(&global[p], &joint_rotations[idx]);
    }
    Ok(pos)
}

/// Per-joint bone lengths recomputed from one J×3 frame of positions.
pub fn bone_lengths(skeleton: &Skeleton, frame: &[f64]) -> Vec<f64> {
    let j = skeleton.joint_count();
    assert_eq!(frame.len(), j * 3, "bone_lengths: frame has {} values for {} joints", frame.len(), j);
    let mut out = vec![0.0; j];
    for idx in 1..j {
        let p = skeleton.parent[idx] as usize;
        let dx = frame[3 * idx] - frame[3 * p];
        let dy = frame[3 * idx + 1] - frame[3 * p + 1];
        let dz = frame[3 * idx + 2] - frame[3 * p + 2];
        out[idx] = (dx * dx + dy * dy + dz * dz).sqrt();
    }
    out
}

// ── sequence records ──────────────────────────────────────────────────────

/// One labeled motion clip. `pose2d`/`pose3d` are row-major
/// `n_frames x joints x {2,3}`; 3D is root-relative camera-space
/// millimeters (the root row is exactly zero). `root_abs` carries the
/// absolute root trajectory so reprojection against `camera` is possible;
/// both are optional so externally produced records without intrinsics
/// still load (the reprojection loss then switches itself off).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub n_frames: usize,
    pub joints: usize,
    pub pose2d: Vec<f64>,
    pub pose3d: Vec<f64>,
    pub camera: Option<Camera>,
    pub root_abs: Option<Vec<f64>>,
    pub seed: u64,
}

impl SequenceRecord {
    pub fn pose2d_frame(&self, t: usize) -> &[f64] {
        &self.pose2d[t * self.joints * 2..(t + 1) * self.joints * 2]
    }

    pub fn pose3d_frame(&self, t: usize) -> &[f64] {
        &self.pose3d[t * self.joints * 3..(t + 1) * self.joints * 3]
    }

    pub fn validate(&self, index: usize) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::Record { index, msg });
        let (n, j) = (self.n_frames, self.joints);
        if n == 0 || n % 2 == 0 {
            return fail(format!("n_frames {n} must be odd and positive"));
        }
        if self.pose2d.len() != n * j * 2 || self.pose3d.len() != n * j * 3 {
            return fail(format!(
                "field sizes (pose2d {}, pose3d {}) do not match {n} frames x {j} joints",
                self.pose2d.len(),
                self.pose3d.len()
            ));
        }
        if let Some(root) = &self.root_abs {
            if root.len() != n * 3 {
                return fail(format!("root_abs length {} != {}", root.len(), n * 3));
            }
        }
        if !self.pose2d.iter().chain(&self.pose3d).all(|v| v.is_finite()) {
            return fail("non-finite coordinate".into());
        }
        for t in 0..n {
            let f = self.pose3d_frame(t);
            if f[0] != 0.0 || f[1] != 0.0 || f[2] != 0.0 {
                return fail(format!("frame {t}: root joint is not at the origin"));
            }
        }
        Ok(())
    }
}

/// Knobs for the sinusoidal motion synthesizer. Frequencies are in cycles
/// per frame, so per-frame smoothness does not depend on sequence length.
#[derive(Debug, Clone)]
pub struct MotionParams {
    /// Global scale on every angle and wander amplitude; 0 freezes the pose.
    pub amplitude: f64,
    /// Sinusoids summed per joint axis.
    pub harmonics: usize,
    /// Frequency draw range, cycles per frame.
    pub freq_range_cpf: (f64, f64),
    /// Peak joint angle in radians; torso/branching joints get 0.4x, the
    /// root 0.5x, so limb chains move most.
    pub base_angle_limit_rad: f64,
    /// Peak root translation wander around its base position.
    pub root_wander_mm: f64,
    /// Camera distance draw range for the sequence's base depth.
    pub depth_range_mm: (f64, f64),
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            harmonics: 3,
            freq_range_cpf: (0.003, 0.012),
            base_angle_limit_rad: 0.45,
            root_wander_mm: 120.0,
            depth_range_mm: (4000.0, 6000.0),
        }
    }
}

struct Osc {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Osc {
    fn bank(rng: &mut ChaCha8Rng, n: usize, peak: f64, freq_range: (f64, f64)) -> Vec<Osc> {
        let mut bank: Vec<Osc> = (0..n)
            .map(|_| Osc {
                amp: rng.gen_range(0.2..1.0),
                freq: rng.gen_range(freq_range.0..freq_range.1),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        let total: f64 = bank.iter().map(|o| o.amp).sum();
        if total > 0.0 {
            for o in &mut bank {
                o.amp *= peak / total;
            }
        }
        bank
    }

    fn eval(bank: &[Osc], t: f64) -> f64 {
        bank.iter()
            .map(|o| o.amp * (std::f64::consts::TAU * o.freq * t + o.phase).sin())
            .sum()
    }
}

fn quantize_px(v: f64) -> f64 {
    (v * PIXEL_GRID).round() / PIXEL_GRID
}

/// Synthesizes one labeled sequence, deterministic in `seed`.
pub fn generate_sequence(
    skeleton: &Skeleton,
    n_frames: usize,
    seed: u64,
    motion: &MotionParams,
) -> SequenceRecord {
    assert!(
        n_frames >= 1 && n_frames % 2 == 1,
        "generate_sequence: n_frames must be odd and positive, got {n_frames}"
    );
    let j = skeleton.joint_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let depth = rng.gen_range(motion.depth_range_mm.0..motion.depth_range_mm.1);
    let base = [
        rng.gen_range(-250.0..250.0),
        rng.gen_range(-150.0..150.0),
        depth,
    ];
    let base_yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let wander_peak = motion.root_wander_mm * motion.amplitude;
    let wander: Vec<Vec<Osc>> = (0..3)
        .map(|_| Osc::bank(&mut rng, 2, wander_peak, motion.freq_range_cpf))
        .collect();

    let mut children = vec![0usize; j];
    for &p in skeleton.parent.iter().skip(1) {
        children[p as usize] += 1;
    }
    let joint_osc: Vec<Vec<Vec<Osc>>> = (0..j)
        .map(|idx| {
            let factor = if idx == 0 {
                0.5
            } else if children[idx] >= 2 {
                0.4
            } else {
                1.0
            };
            let peak = motion.base_angle_limit_rad * motion.amplitude * factor;
            (0..3)
                .map(|_| Osc::bank(&mut rng, motion.harmonics, peak, motion.freq_range_cpf))
                .collect()
        })
        .collect();

    let mut pose2d = Vec::with_capacity(n_frames * j * 2);
    let mut pose3d = Vec::with_capacity(n_frames * j * 3);
    let mut root_abs = Vec::with_capacity(n_frames * 3);
    for frame in 0..n_frames {
        let t = frame as f64;
        let root = [
            base[0] + Osc::eval(&wander[0], t),
            base[1] + Osc::eval(&wander[1], t),
            base[2] + Osc::eval(&wander[2], t),
        ];
        let rotations: Vec<Mat3> = (0..j)
            .map(|idx| {
                let ax = Osc::eval(&joint_osc[idx][0], t);
                let ay = Osc::eval(&joint_osc[idx][1], t);
                let az = Osc::eval(&joint_osc[idx][2], t);
                let r = mat3_mul(&rot_z(az), &mat3_mul(&rot_y(ay), &rot_x(ax)));
                if idx == 0 {
                    mat3_mul(&rot_y(base_yaw), &r)
                } else {
                    r
                }
            })
            .collect();
        let abs = forward_kinematics(skeleton, &rotations, root)
            .expect("generated rotations are orthonormal");
        let px = project(&abs, &GEN_CAMERA).expect("generated poses are in front of the camera");
        for p in &px {
            pose2d.push(quantize_px(p[0]));
            pose2d.push(quantize_px(p[1]));
        }
        for p in &abs {
            pose3d.push(p[0] - root[0]);
            pose3d.push(p[1] - root[1]);
            pose3d.push(p[2] - root[2]);
        }
        root_abs.extend_from_slice(&root);
    }

    SequenceRecord {
        n_frames,
        joints: j,
        pose2d,
        pose3d,
        camera: Some(GEN_CAMERA),
        root_abs: Some(root_abs),
        seed,
    }
}

/// Mirror augmentation: swaps each left/right joint pair, negates 3D x, and
/// reflects 2D x about the image's vertical centerline (`x -> 2*cx - x`).
/// The absolute root trajectory, if present, mirrors with the pose.
pub fn flip_horizontal(record: &SequenceRecord, skeleton: &Skeleton) -> SequenceRecord {
    let j = record.joints;
    assert_eq!(
        j,
        skeleton.joint_count(),
        "flip_horizontal: record has {} joints, skeleton {}",
        j,
        skeleton.joint_count()
    );
    let mut perm: Vec<usize> = (0..j).collect();
    for &(l, r) in &skeleton.left_right_pairs {
        perm[l] = r;
        perm[r] = l;
    }
    let cx = record.camera.map(|c| c.cx).unwrap_or(DEFAULT_PRINCIPAL.0);
    let n = record.n_frames;
    let mut pose2d = vec![0.0; record.pose2d.len()];
    let mut pose3d = vec![0.0; record.pose3d.len()];
    for t in 0..n {
        for src in 0..j {
            let dst = perm[src];
            let i2 = (t * j + src) * 2;
            let o2 = (t * j + dst) * 2;
            pose2d[o2] = 2.0 * cx - record.pose2d[i2];
            pose2d[o2 + 1] = record.pose2d[i2 + 1];
            let i3 = (t * j + src) * 3;
            let o3 = (t * j + dst) * 3;
            pose3d[o3] = -record.pose3d[i3];
            pose3d[o3 + 1] = record.pose3d[i3 + 1];
            pose3d[o3 + 2] = record.pose3d[i3 + 2];
        }
    }
    let root_abs = record.root_abs.as_ref().map(|r| {
        r.chunks(3).flat_map(|p| [-p[0], p[1], p[2]]).collect()
    });
    SequenceRecord {
        n_frames: n,
        joints: j,
        pose2d,
        pose3d,
        camera: record.camera,
        root_abs,
        seed: record.seed,
    }
}

/// Maps pixel coordinates to [-1, 1] model inputs using the principal point
/// as the image center (the generator frames a 2cx x 2cy image).
pub fn normalize_2d(pose2d: &[f64], camera: Option<&Camera>) -> Vec<f64> {
    let (cx, cy) = camera.map(|c| (c.cx, c.cy)).unwrap_or(DEFAULT_PRINCIPAL);
    pose2d
        .chunks(2)
        .flat_map(|p| [p[0] / cx - 1.0, p[1] / cy - 1.0])
        .collect()
}
