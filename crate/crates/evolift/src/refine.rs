//! Recursive refinement head.
//!
//! Turns the enhanced sequence features into 3D poses by alternating two
//! small maps for a fixed number of rounds: a feature refiner that compares
//! what the features currently encode against what the previous round's
//! pose estimate already explains, and a per-joint regression head that
//! reads a 3-vector off every joint feature. One set of weights serves all
//! rounds, so extra rounds add compute but no parameters.

use rand_chacha::ChaCha8Rng;

use crate::blocks::{lin, maybe_drop, rsa_core, AttnParams, DropoutState, LinPair};
use crate::params::{normal, zeros, ParamSet};
use crate::tensor::{Tape, Tensor};

/// Weights of the refinement loop. One copy is reused every round.
#[derive(Debug, Clone)]
pub struct RefineParams {
    /// Number of refinement rounds (L ≥ 1).
    pub rounds: usize,
    /// Joint-axis attention over the refined features, logit-biased by the
    /// pair map exactly like the block-level variant.
    pub attn: AttnParams,
    /// Three-layer GELU MLP lifting a previous 3D estimate back into
    /// feature space: 3 → d_s → d_s → d_s.
    pub mlp1: LinPair,
    pub mlp2: LinPair,
    pub mlp3: LinPair,
    /// Per-joint linear readout d_s → 3. No joint ever sees another
    /// joint's features through this map.
    pub head: LinPair,
    /// Fixed multiplier applied after the readout. Keeping the readout
    /// weights at unit scale and amplifying afterwards matters under a
    /// step-size-normalized optimizer: each update moves a weight by
    /// roughly the learning rate no matter where the output scale lives,
    /// so placing the millimeter scale here multiplies the pose-space
    /// travel every head update buys instead of leaving the head nearly
    /// frozen at its initialization.
    pub head_gain: f64,
}

impl RefineParams {
    /// `head_scale` becomes the fixed output gain of the readout; its
    /// weights start at unit scale regardless. Training on millimeter
    /// targets wants the gain near the pose scale, both so the first
    /// prediction is not orders of magnitude too small and so weight
    /// updates of learning-rate size buy millimeter-range movement.
    pub fn init(
        ps: &mut ParamSet,
        name: &str,
        d_s: usize,
        heads: usize,
        d_p: usize,
        rounds: usize,
        head_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(rounds >= 1, "{name}: need at least one refinement round");
        let attn = AttnParams::init(ps, &format!("{name}/rsa"), d_s, heads, Some(d_p), false, rng);
        let mlp1 = LinPair::init(ps, &format!("{name}/mlp1"), 3, d_s, rng);
        let mlp2 = LinPair::init(ps, &format!("{name}/mlp2"), d_s, d_s, rng);
        let mlp3 = LinPair::init(ps, &format!("{name}/mlp3"), d_s, d_s, rng);
        let head = LinPair {
            w: ps.add(
                &format!("{name}/head/w"),
                &[d_s, 3],
                normal(rng, d_s * 3, 1.0 / (d_s as f64).sqrt()),
            ),
            b: ps.add(&format!("{name}/head/b"), &[3], zeros(3)),
        };
        Self { rounds, attn, mlp1, mlp2, mlp3, head, head_gain: head_scale }
    }
}

/// The feedback MLP reads pose estimates in meters. Estimates are carried
/// in millimeters, hundreds of units tall; feeding them to unit-scale
/// weights raw would blow the refined features (and everything regressed
/// from them) up by orders of magnitude each round.
pub const FEEDBACK_INPUT_SCALE: f64 = 1e-3;

fn mlp3_apply(tape: &mut Tape, ps: &ParamSet, x: Tensor, p: &RefineParams) -> Tensor {
    let x = tape.scale(x, FEEDBACK_INPUT_SCALE);
    let h = lin(tape, ps, x, p.mlp1);
    let h = tape.gelu(h);
    let h = lin(tape, ps, h, p.mlp2);
    let h = tape.gelu(h);
    lin(tape, ps, h, p.mlp3)
}

/// One feature-refinement step: attention over the joints (pair-biased),
/// minus an MLP embedding of the previous pose estimate, added back onto
/// the incoming features. `x_prev = None` disables the estimate branch
/// entirely (the recursion-off ablation); round one of the normal loop
/// passes an actual zero pose instead, so the MLP biases still contribute.
pub fn feat_re(
    tape: &mut Tape,
    ps: &ParamSet,
    se_t: Tensor,
    x_prev: Option<Tensor>,
    pe: Tensor,
    p: &RefineParams,
    mut drop: Option<&mut DropoutState>,
) -> Tensor {
    let attn = rsa_core(tape, ps, se_t, pe, &p.attn);
    let residual = match x_prev {
        Some(x) => {
            let m = mlp3_apply(tape, ps, x, p);
            tape.sub(attn, m)
        }
        None => attn,
    };
    let residual = maybe_drop(tape, residual, &mut drop);
    tape.add(se_t, residual)
}

/// Per-joint, per-frame linear readout [N, J, d_s] → [N, J, 3], scaled by
/// the fixed head gain to reach millimeter range from unit-scale weights.
pub fn reg_head(tape: &mut Tape, ps: &ParamSet, sr: Tensor, p: &RefineParams) -> Tensor {
    let y = lin(tape, ps, sr, p.head);
    tape.scale(y, p.head_gain)
}

/// The general refinement loop: round t uses `round_params[t]`, so passing
/// L distinct copies trains per-round weights (an experimentation hook; the
/// standard model shares one copy across rounds via [`recursive_refine`]).
/// Returns the final estimate plus every intermediate round's estimate.
pub fn refine_schedule(
    tape: &mut Tape,
    ps: &ParamSet,
    se: Tensor,
    pe: Tensor,
    round_params: &[&RefineParams],
    use_mlp: bool,
    mut drop: Option<&mut DropoutState>,
) -> (Tensor, Vec<Tensor>) {
    assert!(!round_params.is_empty(), "refinement needs at least one round");
    let sh = tape.shape(se).to_vec();
    let (n, j) = (sh[0], sh[1]);
    let mut s = se;
    let mut x_prev = use_mlp.then(|| tape.constant(vec![0.0; n * j * 3], &[n, j, 3]));
    let mut all_rounds = Vec::with_capacity(round_params.len());
    for p in round_params {
        s = feat_re(tape, ps, s, x_prev, pe, p, drop.as_deref_mut());
        let x = reg_head(tape, ps, s, p);
        all_rounds.push(x);
        if use_mlp {
            x_prev = Some(x);
        }
    }
    (*all_rounds.last().unwrap(), all_rounds)
}

/// Standard loop: `p.rounds` rounds sharing the same weights, starting from
/// a zero pose estimate. Supervision normally applies to the final round
/// only; the intermediate estimates are returned for callers that want
/// deeper supervision or diagnostics.
pub fn recursive_refine(
    tape: &mut Tape,
    ps: &ParamSet,
    se: Tensor,
    pe: Tensor,
    p: &RefineParams,
    drop: Option<&mut DropoutState>,
) -> (Tensor, Vec<Tensor>) {
    let rounds: Vec<&RefineParams> = std::iter::repeat(p).take(p.rounds).collect();
    refine_schedule(tape, ps, se, pe, &rounds, true, drop)
}

/// Index of the center frame of an odd-length window.
pub fn center_frame_index(n_frames: usize) -> usize {
    assert!(
        n_frames % 2 == 1,
        "center frame undefined for even window length {n_frames}"
    );
    (n_frames - 1) / 2
}

/// Slices the center frame out of a [N, J, 3] estimate, keeping shape
/// [1, J, 3] so downstream tensor ops stay rank-3.
pub fn center_frame(tape: &mut Tape, x: Tensor) -> Tensor {
    let n = tape.shape(x)[0];
    tape.slice_axis0(x, center_frame_index(n), 1)
}
