//! Training objectives over predicted pose sequences: a coordinate term,
//! first- and second-difference smoothness terms, an optional reprojection
//! term, and their weighted combination into the scalar that drives
//! backpropagation. All terms are built on tape ops, so gradients flow to
//! every model parameter upstream of the prediction.

use serde::{Deserialize, Serialize};

use crate::kinematics::Camera;
use crate::tensor::{Tape, Tensor};

/// Coefficients on the auxiliary loss terms. The coordinate term always
/// enters with weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_a: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_v: 0.2, lambda_a: 0.2, lambda_p: 0.1 }
    }
}

impl LossWeights {
    /// Weights scale penalty terms, so negatives would reward error.
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_v", self.lambda_v),
            ("lambda_a", self.lambda_a),
            ("lambda_p", self.lambda_p),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("loss weight {name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

fn assert_same_shape(tape: &Tape, what: &str, a: Tensor, b: Tensor) {
    assert_eq!(
        tape.shape(a),
        tape.shape(b),
        "{what}: prediction and target shapes differ"
    );
}

/// Mean over frames and joints of the per-joint position error between two
/// `[N, J, 3]` millimeter sequences. `squared` switches the per-joint term
/// from the Euclidean distance to its square.
pub fn loss_coord(tape: &mut Tape, pred: Tensor, gt: Tensor, squared: bool) -> Tensor {
    assert_same_shape(tape, "loss_coord", pred, gt);
    assert_eq!(tape.shape(pred).len(), 3, "loss_coord: expected [N, J, 3] inputs");
    let d = tape.sub(pred, gt);
    tape.euclid_mean_rows(d, squared)
}

/// Mean error between the frame-to-frame displacement of the prediction and
/// of the target. Sequences shorter than 2 frames have no displacement and
/// score 0.
pub fn loss_velocity(tape: &mut Tape, pred: Tensor, gt: Tensor) -> Tensor {
    assert_same_shape(tape, "loss_velocity", pred, gt);
    if tape.shape(pred)[0] < 2 {
        return tape.scalar(0.0);
    }
    let vp = tape.diff_axis0(pred);
    let vg = tape.diff_axis0(gt);
    let d = tape.sub(vp, vg);
    tape.euclid_mean_rows(d, false)
}

/// Same as [`loss_velocity`] one difference deeper: matches the second
/// frame difference of prediction and target. Needs at least 3 frames.
pub fn loss_acceleration(tape: &mut Tape, pred: Tensor, gt: Tensor) -> Tensor {
    assert_same_shape(tape, "loss_acceleration", pred, gt);
    if tape.shape(pred)[0] < 3 {
        return tape.scalar(0.0);
    }
    let vp = tape.diff_axis0(pred);
    let vg = tape.diff_axis0(gt);
    let ap = tape.diff_axis0(vp);
    let ag = tape.diff_axis0(vg);
    let d = tape.sub(ap, ag);
    tape.euclid_mean_rows(d, false)
}

/// Mean pixel distance between the labeled 2D pose and the prediction
/// pushed back through the camera. The root-relative prediction is first
/// re-anchored by adding the absolute root trajectory (`root_abs`, one
/// camera-space millimeter triple per frame), so depths must stay positive.
pub fn loss_reproj(
    tape: &mut Tape,
    pred: Tensor,
    gt2d: Tensor,
    camera: &Camera,
    root_abs: &[f64],
) -> Tensor {
    let sh = tape.shape(pred).to_vec();
    assert_eq!(sh.len(), 3, "loss_reproj: expected [N, J, 3] prediction");
    let (n, j) = (sh[0], sh[1]);
    assert_eq!(
        tape.shape(gt2d),
        &[n, j, 2],
        "loss_reproj: 2D labels do not match the prediction's frames and joints"
    );
    assert_eq!(
        root_abs.len(),
        n * 3,
        "loss_reproj: root trajectory needs one xyz triple per frame"
    );
    let mut root = vec![0.0; n * j * 3];
    for t in 0..n {
        for jj in 0..j {
            root[(t * j + jj) * 3..(t * j + jj) * 3 + 3]
                .copy_from_slice(&root_abs[t * 3..t * 3 + 3]);
        }
    }
    let root = tape.constant(root, &[n, j, 3]);
    let abs3d = tape.add(pred, root);
    let proj = tape.pinhole_project(abs3d, camera.fx, camera.fy, camera.cx, camera.cy);
    let d = tape.sub(proj, gt2d);
    tape.euclid_mean_rows(d, false)
}

/// The individual loss terms of one sequence, kept separate so callers can
/// log them. `reproj` is `None` when the record carries no camera or no
/// root trajectory; the total then simply omits that term.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub coord: Tensor,
    pub velocity: Tensor,
    pub acceleration: Tensor,
    pub reproj: Option<Tensor>,
}

/// Builds every applicable loss term for one predicted sequence against its
/// labels. `gt2d` are raw pixel labels (not the normalized model input).
pub fn sequence_parts(
    tape: &mut Tape,
    pred: Tensor,
    gt3d: Tensor,
    gt2d: Tensor,
    camera: Option<&Camera>,
    root_abs: Option<&[f64]>,
    squared_coord: bool,
) -> LossParts {
    let coord = loss_coord(tape, pred, gt3d, squared_coord);
    let velocity = loss_velocity(tape, pred, gt3d);
    let acceleration = loss_acceleration(tape, pred, gt3d);
    let reproj = match (camera, root_abs) {
        (Some(cam), Some(root)) => Some(loss_reproj(tape, pred, gt2d, cam, root)),
        _ => None,
    };
    LossParts { coord, velocity, acceleration, reproj }
}

/// Weighted sum of the loss terms: coordinate term plus `lambda_v`,
/// `lambda_a`, `lambda_p` times the velocity, acceleration, and (when
/// present) reprojection terms.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Tensor {
    let v = tape.scale(parts.velocity, w.lambda_v);
    let a = tape.scale(parts.acceleration, w.lambda_a);
    let mut total = tape.add(parts.coord, v);
    total = tape.add(total, a);
    if let Some(reproj) = parts.reproj {
        let p = tape.scale(reproj, w.lambda_p);
        total = tape.add(total, p);
    }
    total
}
