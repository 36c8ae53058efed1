//! The complete lifter: input embedding, structural pair features, the
//! spatiotemporal block stack, and the refinement head wired into a single
//! forward pass from normalized 2D windows to root-relative 3D poses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{embed_sequence, ste_stack, DropoutState, StevoDims, StevoParams};
use crate::kinematics::Skeleton;
use crate::params::ParamSet;
use crate::refine::{refine_schedule, RefineParams};
use crate::structural::{build_joint_map, structural_features, JointMap, SprParams};
use crate::tensor::{Tape, Tensor};

/// Output gain of the regression head, in millimeters.
///
/// The rest of the network works at unit scale while the targets are
/// root-relative coordinates spanning hundreds of millimeters. The head
/// keeps unit-scale weights and multiplies its readout by this constant,
/// which has two effects: epoch-0 predictions start at pose scale, and —
/// because the optimizer normalizes every update to roughly learning-rate
/// size — each head update moves predictions by a useful number of
/// millimeters instead of a fraction of one. Without the gain the decaying
/// schedule runs out long before the head can cross pose-scale distances.
pub const REG_HEAD_INIT_SCALE: f64 = 300.0;

/// Architecture sizes: the block-stack profile plus the refinement depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub stevo: StevoDims,
    pub rounds: usize,
}

impl ModelDims {
    /// Full-size profile (for completeness; slow without a GPU).
    pub fn full(n_max: usize) -> Self {
        Self { stevo: StevoDims::full(n_max), rounds: 2 }
    }

    /// Small profile that trains in minutes on a laptop CPU.
    pub fn desk(n_max: usize) -> Self {
        Self { stevo: StevoDims::desk(n_max), rounds: 2 }
    }
}

/// Ablation switches. Defaults run the full model.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Feed kinematic pair features into the stack; `false` replaces them
    /// with zeros so the pair branch starts from a blank slate.
    pub use_spr: bool,
    /// Run all refinement rounds with the pose-estimate feedback branch;
    /// `false` collapses the head to one round without that branch.
    pub use_recursion: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { use_spr: true, use_recursion: true }
    }
}

/// A fully assembled model: every learnable lives in `ps`, and the
/// parameter bundles hold typed references into it.
#[derive(Debug)]
pub struct PoseLifter {
    pub skeleton: Skeleton,
    pub joint_map: JointMap,
    pub dims: ModelDims,
    pub ps: ParamSet,
    pub stevo: StevoParams,
    pub spr: SprParams,
    pub refine: RefineParams,
}

impl PoseLifter {
    /// Builds all weights from one seed; identical seeds and dims produce
    /// bit-identical parameter sets.
    pub fn init(skeleton: Skeleton, dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let stevo = StevoParams::init(&mut ps, &dims.stevo, skeleton.joint_count(), &mut rng);
        let spr = SprParams::init(&mut ps, skeleton.joint_count(), dims.stevo.d_p, &mut rng);
        let refine = RefineParams::init(
            &mut ps,
            "rr",
            dims.stevo.d_s,
            dims.stevo.heads,
            dims.stevo.d_p,
            dims.rounds,
            REG_HEAD_INIT_SCALE,
            &mut rng,
        );
        let joint_map = build_joint_map(&skeleton);
        Self { skeleton, joint_map, dims: dims.clone(), ps, stevo, spr, refine }
    }

    pub fn joints(&self) -> usize {
        self.skeleton.joint_count()
    }

    /// Normalized 2D window [N, J, 2] → root-relative 3D estimate
    /// [N, J, 3]. N must be odd (so a center frame exists) and at most the
    /// embedding's positional capacity.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pose2d: Tensor,
        opt: ForwardOptions,
        mut drop: Option<&mut DropoutState>,
    ) -> Tensor {
        let sh = tape.shape(pose2d).to_vec();
        assert_eq!(sh.len(), 3, "forward: input must be [N, J, 2], got {sh:?}");
        let (n, j) = (sh[0], sh[1]);
        assert!(n % 2 == 1, "forward: window length {n} must be odd");
        assert_eq!(
            j,
            self.joints(),
            "forward: input has {j} joints but the skeleton has {}",
            self.joints()
        );
        let d_p = self.dims.stevo.d_p;

        let s = embed_sequence(tape, &self.ps, pose2d, &self.stevo.embed);
        let pair = if opt.use_spr {
            structural_features(tape, &self.ps, &self.joint_map, &self.spr)
        } else {
            tape.constant(vec![0.0; j * j * d_p], &[j, j, d_p])
        };
        let (se, pe) = ste_stack(tape, &self.ps, s, pair, &self.stevo, drop.as_deref_mut());

        let rounds = if opt.use_recursion { self.dims.rounds } else { 1 };
        let round_params: Vec<&RefineParams> = std::iter::repeat(&self.refine).take(rounds).collect();
        let (x, _) = refine_schedule(tape, &self.ps, se, pe, &round_params, opt.use_recursion, drop);
        x
    }
}
