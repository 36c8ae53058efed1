//! Coupled sequence/pair attention blocks.
//!
//! A block carries two streams: per-frame joint features S (N x J x d_s)
//! and pair features P (J x J x d_p). The sequence branch runs pair-biased
//! attention across joints, plain attention across frames, and a
//! feed-forward; the pair branch then folds the refreshed sequence back in
//! through an outer-product mean and mixes pairs with triangular
//! multiplicative updates and triangular attention before its own
//! feed-forward. Every sublayer is pre-layer-norm with a residual add, so
//! zeroing any sublayer's output projection turns it into an exact
//! identity — the unit tests lean on that ladder.

use rand_chacha::ChaCha8Rng;

use crate::params::{full, xavier, zeros, ParamRef, ParamSet};
use crate::tensor::{Tape, Tensor};

/// Architecture widths. `n_max` caps the temporal positional table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StevoDims {
    pub blocks: usize,
    pub heads: usize,
    pub d_s: usize,
    pub d_p: usize,
    pub d_o: usize,
    pub n_max: usize,
}

impl StevoDims {
    /// Full-size profile for real training runs.
    pub fn full(n_max: usize) -> Self {
        Self { blocks: 4, heads: 8, d_s: 256, d_p: 128, d_o: 32, n_max }
    }

    /// Small profile that trains in minutes on a laptop CPU.
    pub fn desk(n_max: usize) -> Self {
        Self { blocks: 2, heads: 2, d_s: 32, d_p: 16, d_o: 16, n_max }
    }
}

/// Owns the dropout rate and its RNG during training; `None` in the
/// signatures below means inference (dropout off, fully deterministic).
#[derive(Debug)]
pub struct DropoutState {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl DropoutState {
    pub fn apply(&mut self, tape: &mut Tape, x: Tensor) -> Tensor {
        tape.dropout(x, self.rate, &mut self.rng)
    }
}

pub(crate) fn maybe_drop(tape: &mut Tape, x: Tensor, drop: &mut Option<&mut DropoutState>) -> Tensor {
    match drop {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

// ── parameter bundles ─────────────────────────────────────────────────────

/// Weight + bias of one linear map.
#[derive(Debug, Clone, Copy)]
pub struct LinPair {
    pub w: ParamRef,
    pub b: ParamRef,
}

/// Initialization shrink for the terminal projection of every residual
/// branch (attention output, transition second layer, pair-update output).
/// Near-identity residual blocks at the start keep the embedded input the
/// dominant part of the features all the way to the regression head, so
/// the early epochs — the only ones the fast-decaying schedule funds well —
/// are spent fitting the input instead of first unlearning layers of
/// input-independent noise. Nonzero so every weight still receives a
/// verifiable gradient from step one.
pub const RESIDUAL_OUT_INIT_SCALE: f64 = 0.1;

impl LinPair {
    pub(crate) fn init(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: ps.add(&format!("{name}/w"), &[fan_in, fan_out], xavier(rng, fan_in, fan_out)),
            b: ps.add(&format!("{name}/b"), &[fan_out], zeros(fan_out)),
        }
    }

    /// [`LinPair::init`] with the weight draw multiplied by `scale`.
    fn init_scaled(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = xavier(rng, fan_in, fan_out);
        w.iter_mut().for_each(|v| *v *= scale);
        Self {
            w: ps.add(&format!("{name}/w"), &[fan_in, fan_out], w),
            b: ps.add(&format!("{name}/b"), &[fan_out], zeros(fan_out)),
        }
    }

    /// Same, but with every bias set to `bias` (gates start mostly open).
    fn init_bias(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: ps.add(&format!("{name}/w"), &[fan_in, fan_out], xavier(rng, fan_in, fan_out)),
            b: ps.add(&format!("{name}/b"), &[fan_out], full(fan_out, bias)),
        }
    }
}

pub(crate) fn lin(tape: &mut Tape, ps: &ParamSet, x: Tensor, p: LinPair) -> Tensor {
    let w = tape.param(ps, p.w);
    let b = tape.param(ps, p.b);
    tape.linear(x, w, b)
}

/// Layer-norm gain + shift.
#[derive(Debug, Clone, Copy)]
pub struct LnPair {
    pub g: ParamRef,
    pub b: ParamRef,
}

impl LnPair {
    fn init(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        Self {
            g: ps.add(&format!("{name}/g"), &[d], full(d, 1.0)),
            b: ps.add(&format!("{name}/b"), &[d], zeros(d)),
        }
    }
}

pub(crate) fn norm(tape: &mut Tape, ps: &ParamSet, x: Tensor, p: LnPair) -> Tensor {
    let g = tape.param(ps, p.g);
    let b = tape.param(ps, p.b);
    tape.layer_norm(x, g, b)
}

/// Input embedding: per-joint 2→d_s map plus two learnable tables — a
/// per-frame row (temporal position, `n_max` rows) and a per-joint row
/// (joint identity, `joints` rows). The joint rows matter: without them a
/// joint is identifiable only through its coordinates, so attention has
/// nothing stable to key on and per-joint output offsets have no direct
/// linear path.
#[derive(Debug, Clone)]
pub struct EmbedParams {
    pub proj: LinPair,
    pub pos: ParamRef,
    pub joint: ParamRef,
    pub n_max: usize,
    pub joints: usize,
}

impl EmbedParams {
    pub fn init(
        ps: &mut ParamSet,
        d_s: usize,
        n_max: usize,
        joints: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            proj: LinPair::init(ps, "embed/proj", 2, d_s, rng),
            pos: ps.add("embed/pos", &[n_max, d_s], normal_table(rng, n_max * d_s)),
            joint: ps.add("embed/joint", &[joints, d_s], normal_table(rng, joints * d_s)),
            n_max,
            joints,
        }
    }
}

fn normal_table(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Unit-ish rows, not tie-breaking noise: a joint near the image center
    // projects to a near-zero vector, and the frame row has to keep that
    // row's layer norm away from its degenerate (and violently curved)
    // zero-variance regime.
    crate::params::normal(rng, n, 0.5)
}

/// Multi-head attention weights. `pair_bias_w` (when present) projects a
/// pair map to one additive logit bias per head, without bias so zero
/// weights reduce to exactly unbiased attention. `gate` (when present)
/// multiplies the projected output by sigmoid(linear(normed input)).
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub heads: usize,
    pub ln: LnPair,
    pub q: LinPair,
    pub k: LinPair,
    pub v: LinPair,
    pub o: LinPair,
    pub pair_bias_w: Option<ParamRef>,
    pub gate: Option<LinPair>,
}

impl AttnParams {
    pub fn init(
        ps: &mut ParamSet,
        name: &str,
        d: usize,
        heads: usize,
        pair_dim: Option<usize>,
        gated: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            heads >= 1 && d % heads == 0,
            "{name}: width {d} not divisible into {heads} heads"
        );
        Self {
            heads,
            ln: LnPair::init(ps, &format!("{name}/ln"), d),
            q: LinPair::init(ps, &format!("{name}/q"), d, d, rng),
            k: LinPair::init(ps, &format!("{name}/k"), d, d, rng),
            v: LinPair::init(ps, &format!("{name}/v"), d, d, rng),
            o: LinPair::init_scaled(ps, &format!("{name}/o"), d, d, RESIDUAL_OUT_INIT_SCALE, rng),
            pair_bias_w: pair_dim.map(|d_p| {
                ps.add(&format!("{name}/pair/w"), &[d_p, heads], xavier(rng, d_p, heads))
            }),
            gate: gated.then(|| LinPair::init_bias(ps, &format!("{name}/gate"), d, d, 1.0, rng)),
        }
    }
}

/// Projects a J x J x d_p map to per-head additive logits, shape [h, J, J].
fn pair_bias(tape: &mut Tape, ps: &ParamSet, pair: Tensor, w: ParamRef) -> Tensor {
    let sh = tape.shape(pair).to_vec();
    let (j, d_p) = (sh[0], sh[2]);
    let heads = ps.shape(w)[1];
    let flat = tape.reshape(pair, &[j * j, d_p]);
    let wt = tape.param(ps, w);
    let logits = tape.linear_nb(flat, wt);
    let logits = tape.reshape(logits, &[j, j, heads]);
    tape.permute(logits, &[2, 0, 1])
}

/// Multi-head attention over the middle axis of `zn` [R, C, d]: each of the
/// R rows attends across its C columns independently. `zn` must already be
/// layer-normed; `bias` is an optional [heads, C, C] additive logit map
/// shared by all rows. Returns the output projection (no residual).
fn mha_prenormed(
    tape: &mut Tape,
    ps: &ParamSet,
    zn: Tensor,
    p: &AttnParams,
    bias: Option<Tensor>,
) -> Tensor {
    let sh = tape.shape(zn).to_vec();
    assert_eq!(sh.len(), 3, "attention input must be rank 3, got {sh:?}");
    let (r, c, d) = (sh[0], sh[1], sh[2]);
    let (h, dh) = (p.heads, d / p.heads);

    let split = |tape: &mut Tape, t: Tensor| {
        let t = tape.reshape(t, &[r, c, h, dh]);
        let t = tape.permute(t, &[0, 2, 1, 3]);
        tape.reshape(t, &[r * h, c, dh])
    };
    let q = lin(tape, ps, zn, p.q);
    let k = lin(tape, ps, zn, p.k);
    let v = lin(tape, ps, zn, p.v);
    let (qh, kh, vh) = (split(tape, q), split(tape, k), split(tape, v));

    let scores = tape.bmm(qh, kh, true);
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(b) = bias {
        let four = tape.reshape(scores, &[r, h, c, c]);
        let biased = tape.add(four, b);
        scores = tape.reshape(biased, &[r * h, c, c]);
    }
    let attn = tape.softmax_last(scores);
    let ctx = tape.bmm(attn, vh, false);
    let ctx = tape.reshape(ctx, &[r, h, c, dh]);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let ctx = tape.reshape(ctx, &[r, c, d]);
    let mut out = lin(tape, ps, ctx, p.o);
    if let Some(g) = p.gate {
        let gate = lin(tape, ps, zn, g);
        let gate = tape.sigmoid(gate);
        out = tape.mul(gate, out);
    }
    out
}

// ── sequence branch ───────────────────────────────────────────────────────

/// Fixed multiplier on the normalized 2D coordinates before the embedding
/// projection. Screen-normalized poses span only a tenth or two of the
/// unit square, so without amplification the learnable per-frame rows
/// drown the actual measurement at initialization and most of each
/// feature carries no information about the person. Amplifying the input
/// also multiplies what every projection-weight update buys under a
/// step-size-normalized optimizer, the same trick the regression head
/// plays on the output side.
pub const INPUT_EMBED_GAIN: f64 = 8.0;

/// Lifts normalized 2D inputs [N, J, 2] to sequence features [N, J, d_s],
/// adds the frame-position row to every joint of that frame, and the
/// joint-identity row to that joint in every frame. Inputs are amplified
/// by [`INPUT_EMBED_GAIN`] ahead of the projection.
pub fn embed_sequence(tape: &mut Tape, ps: &ParamSet, pose2d: Tensor, p: &EmbedParams) -> Tensor {
    let sh = tape.shape(pose2d).to_vec();
    assert_eq!(sh.len(), 3, "embed_sequence: input must be [N, J, 2], got {sh:?}");
    assert_eq!(sh[2], 2, "embed_sequence: last axis must hold (x, y), got {sh:?}");
    let (n, j) = (sh[0], sh[1]);
    assert!(
        n <= p.n_max,
        "embed_sequence: {n} frames exceed the positional table capacity {}",
        p.n_max
    );
    assert_eq!(j, p.joints, "embed_sequence: {j} joints but the identity table has {}", p.joints);
    let d_s = ps.shape(p.pos)[1];
    let amplified = tape.scale(pose2d, INPUT_EMBED_GAIN);
    let s = lin(tape, ps, amplified, p.proj);
    let table = tape.param(ps, p.pos);
    let rows = tape.slice_axis0(table, 0, n);
    let rows = tape.reshape(rows, &[n, 1, d_s]);
    let s = tape.add(s, rows);
    let jtable = tape.param(ps, p.joint);
    let jrows = tape.reshape(jtable, &[1, j, d_s]);
    tape.add(s, jrows)
}

/// Attention across joints within each frame, logit-biased by the pair map:
/// the bias makes bones and symmetric partners attend differently from
/// unrelated joints. Residual: S + attention(LN(S)).
pub fn rsa(
    tape: &mut Tape,
    ps: &ParamSet,
    s: Tensor,
    pair: Tensor,
    p: &AttnParams,
    mut drop: Option<&mut DropoutState>,
) -> Tensor {
    let core = rsa_core(tape, ps, s, pair, p);
    let core = maybe_drop(tape, core, &mut drop);
    tape.add(s, core)
}

/// The attention part of [`rsa`] without the residual (the refinement head
/// consumes it directly).
pub fn rsa_core(tape: &mut Tape, ps: &ParamSet, s: Tensor, pair: Tensor, p: &AttnParams) -> Tensor {
    let j = tape.shape(s)[1];
    let pj = tape.shape(pair)[0];
    assert_eq!(j, pj, "rsa: sequence has {j} joints but pair map is {pj}x{pj}");
    let w = p.pair_bias_w.expect("rsa requires pair-bias weights");
    let bias = pair_bias(tape, ps, pair, w);
    let zn = norm(tape, ps, s, p.ln);
    mha_prenormed(tape, ps, zn, p, Some(bias))
}

/// Attention across frames within each joint track (no pair bias).
/// Residual: S + attention(LN(S)).
pub fn csa(
    tape: &mut Tape,
    ps: &ParamSet,
    s: Tensor,
    p: &AttnParams,
    mut drop: Option<&mut DropoutState>,
) -> Tensor {
    let st = tape.permute(s, &[1, 0, 2]);
    let zn = norm(tape, ps, st, p.ln);
    let core = mha_prenormed(tape, ps, zn, p, None);
    let core = tape.permute(core, &[1, 0, 2]);
    let core = maybe_drop(tape, core, &mut drop);
    tape.add(s, core)
}

/// Pre-norm two-layer GELU feed-forward with residual, width d → 4d → d.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub ln: LnPair,
    pub lin1: LinPair,
    pub lin2: LinPair,
}

impl FfnParams {
    pub fn init(ps: &mut ParamSet, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln: LnPair::init(ps, &format!("{name}/ln"), d),
            lin1: LinPair::init(ps, &format!("{name}/lin1"), d, 4 * d, rng),
            lin2: LinPair::init_scaled(ps, &format!("{name}/lin2"), 4 * d, d, RESIDUAL_OUT_INIT_SCALE, rng),
        }
    }
}

pub fn feed_forward(
    tape: &mut Tape,
    ps: &ParamSet,
    x: Tensor,
    p: &FfnParams,
    mut drop: Option<&mut DropoutState>,
) -> Tensor {
    let xn = norm(tape, ps, x, p.ln);
    let h = lin(tape, ps, xn, p.lin1);
    let h = tape.gelu(h);
    let y = lin(tape, ps, h, p.lin2);
    let y = maybe_drop(tape, y, &mut drop);
    tape.add(x, y)
}

// ── pair branch ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OpmParams {
    pub a: LinPair,
    pub b: LinPair,
    pub out: LinPair,
}

impl OpmParams {
    pub fn init(ps: &mut ParamSet, name: &str, d_s: usize, d_o: usize, d_p: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: LinPair::init(ps, &format!("{name}/a"), d_s, d_o, rng),
            b: LinPair::init(ps, &format!("{name}/b"), d_s, d_o, rng),
            out: LinPair::init_scaled(ps, &format!("{name}/out"), d_o * d_o, d_p, RESIDUAL_OUT_INIT_SCALE, rng),
        }
    }
}

/// Temporal average of per-frame outer products:
/// F[i,j] = (1/N) Σ_n a[n,i] ⊗ b[n,j], inputs [N, J, d_o], output
/// [J, J, d_o, d_o]. Phrased as one (J·d_o)² matrix product.
pub fn outer_product_mean(tape: &mut Tape, a: Tensor, b: Tensor) -> Tensor {
    let sh = tape.shape(a).to_vec();
    assert_eq!(
        &sh,
        tape.shape(b),
        "outer_product_mean: operand shapes {:?} vs {:?} differ",
        sh,
        tape.shape(b)
    );
    let (n, j, d) = (sh[0], sh[1], sh[2]);
    let a2 = tape.reshape(a, &[n, j * d]);
    let b2 = tape.reshape(b, &[n, j * d]);
    let g = tape.matmul(a2, b2, true, false);
    let g = tape.scale(g, 1.0 / n as f64);
    let g = tape.reshape(g, &[j, d, j, d]);
    tape.permute(g, &[0, 2, 1, 3])
}

/// Pushes sequence information into the pair map: project to d_o channels,
/// average the per-frame outer products over time, and add a linear image
/// of the flattened product to P.
pub fn opm_update(
    tape: &mut Tape,
    ps: &ParamSet,
    se: Tensor,
    pair: Tensor,
    p: &OpmParams,
) -> Tensor {
    let j = tape.shape(se)[1];
    let d_p = tape.shape(pair)[2];
    let a = lin(tape, ps, se, p.a);
    let b = lin(tape, ps, se, p.b);
    let d_o = tape.shape(a)[2];
    let f = outer_product_mean(tape, a, b);
    let f2 = tape.reshape(f, &[j * j, d_o * d_o]);
    let upd = lin(tape, ps, f2, p.out);
    let upd = tape.reshape(upd, &[j, j, d_p]);
    tape.add(pair, upd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriUpdateMode {
    Outgoing,
    Incoming,
}

/// Triangular multiplicative update weights: gated value maps `a`/`b`,
/// post-sum layer norm, gated output projection.
#[derive(Debug, Clone)]
pub struct TriUpdateParams {
    pub ln_in: LnPair,
    pub a: LinPair,
    pub a_gate: LinPair,
    pub b: LinPair,
    pub b_gate: LinPair,
    pub ln_u: LnPair,
    pub out: LinPair,
    pub out_gate: LinPair,
}

impl TriUpdateParams {
    pub fn init(ps: &mut ParamSet, name: &str, d_p: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln_in: LnPair::init(ps, &format!("{name}/ln_in"), d_p),
            a: LinPair::init(ps, &format!("{name}/a"), d_p, d_p, rng),
            a_gate: LinPair::init_bias(ps, &format!("{name}/a_gate"), d_p, d_p, 1.0, rng),
            b: LinPair::init(ps, &format!("{name}/b"), d_p, d_p, rng),
            b_gate: LinPair::init_bias(ps, &format!("{name}/b_gate"), d_p, d_p, 1.0, rng),
            ln_u: LnPair::init(ps, &format!("{name}/ln_u"), d_p),
            out: LinPair::init_scaled(ps, &format!("{name}/out"), d_p, d_p, RESIDUAL_OUT_INIT_SCALE, rng),
            out_gate: LinPair::init_bias(ps, &format!("{name}/out_gate"), d_p, d_p, 1.0, rng),
        }
    }
}

/// Mixes every pair (i,j) with pairs sharing an endpoint: with
/// z = LN(P), a = σ(lin(z))⊙lin(z) and b likewise,
/// outgoing: u_ij = Σ_k a_ik ⊙ b_jk; incoming: u_ij = Σ_k a_ki ⊙ b_kj;
/// result P + σ(lin(z)) ⊙ lin(LN(u)).
pub fn triangle_update(
    tape: &mut Tape,
    ps: &ParamSet,
    pair: Tensor,
    mode: TriUpdateMode,
    p: &TriUpdateParams,
) -> Tensor {
    let z = norm(tape, ps, pair, p.ln_in);
    let gated = |tape: &mut Tape, val: LinPair, gate: LinPair| {
        let v = lin(tape, ps, z, val);
        let g = lin(tape, ps, z, gate);
        let g = tape.sigmoid(g);
        tape.mul(g, v)
    };
    let a = gated(tape, p.a, p.a_gate);
    let b = gated(tape, p.b, p.b_gate);
    // per channel c: outgoing U_c = A_c B_cᵀ, incoming U_c = A_cᵀ B_c
    let axes: &[usize] = match mode {
        TriUpdateMode::Outgoing => &[2, 0, 1],
        TriUpdateMode::Incoming => &[2, 1, 0],
    };
    let ac = tape.permute(a, axes);
    let bc = tape.permute(b, axes);
    let u = tape.bmm(ac, bc, true);
    let u = tape.permute(u, &[1, 2, 0]);
    let un = norm(tape, ps, u, p.ln_u);
    let upd = lin(tape, ps, un, p.out);
    let g = lin(tape, ps, z, p.out_gate);
    let g = tape.sigmoid(g);
    let upd = tape.mul(g, upd);
    tape.add(pair, upd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriAttnMode {
    Starting,
    Ending,
}

/// Row-wise gated attention over the pair map. Starting mode: within row i,
/// query position (i,j) attends over keys (i,k) with additive logit bias
/// projected from z_jk. Ending mode is the exact transpose dual — the same
/// computation on the transposed map, transposed back — which attends
/// within columns instead.
pub fn triangle_attention(
    tape: &mut Tape,
    ps: &ParamSet,
    pair: Tensor,
    mode: TriAttnMode,
    p: &AttnParams,
    mut drop: Option<&mut DropoutState>,
) -> Tensor {
    let x = match mode {
        TriAttnMode::Starting => pair,
        TriAttnMode::Ending => tape.permute(pair, &[1, 0, 2]),
    };
    let zn = norm(tape, ps, x, p.ln);
    let w = p.pair_bias_w.expect("triangle attention requires pair-bias weights");
    let bias = pair_bias(tape, ps, zn, w);
    let core = mha_prenormed(tape, ps, zn, p, Some(bias));
    let core = match mode {
        TriAttnMode::Starting => core,
        TriAttnMode::Ending => tape.permute(core, &[1, 0, 2]),
    };
    let core = maybe_drop(tape, core, &mut drop);
    tape.add(pair, core)
}

// ── the block and the stack ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub rsa: AttnParams,
    pub csa: AttnParams,
    pub seq_ff: FfnParams,
    pub opm: OpmParams,
    pub otu: TriUpdateParams,
    pub itu: TriUpdateParams,
    pub sta: AttnParams,
    pub eta: AttnParams,
    pub pair_ff: FfnParams,
}

impl BlockParams {
    pub fn init(ps: &mut ParamSet, name: &str, dims: &StevoDims, rng: &mut ChaCha8Rng) -> Self {
        let (d_s, d_p, h) = (dims.d_s, dims.d_p, dims.heads);
        Self {
            rsa: AttnParams::init(ps, &format!("{name}/rsa"), d_s, h, Some(d_p), false, rng),
            csa: AttnParams::init(ps, &format!("{name}/csa"), d_s, h, None, false, rng),
            seq_ff: FfnParams::init(ps, &format!("{name}/seq_ff"), d_s, rng),
            opm: OpmParams::init(ps, &format!("{name}/opm"), d_s, dims.d_o, d_p, rng),
            otu: TriUpdateParams::init(ps, &format!("{name}/otu"), d_p, rng),
            itu: TriUpdateParams::init(ps, &format!("{name}/itu"), d_p, rng),
            sta: AttnParams::init(ps, &format!("{name}/sta"), d_p, h, Some(d_p), true, rng),
            eta: AttnParams::init(ps, &format!("{name}/eta"), d_p, h, Some(d_p), true, rng),
            pair_ff: FfnParams::init(ps, &format!("{name}/pair_ff"), d_p, rng),
        }
    }

    /// Output-projection parameters of every sublayer; zeroing them turns
    /// the whole block into an identity (used by reduction tests).
    pub fn output_projections(&self) -> Vec<ParamRef> {
        vec![
            self.rsa.o.w,
            self.rsa.o.b,
            self.csa.o.w,
            self.csa.o.b,
            self.seq_ff.lin2.w,
            self.seq_ff.lin2.b,
            self.opm.out.w,
            self.opm.out.b,
            self.otu.out.w,
            self.otu.out.b,
            self.itu.out.w,
            self.itu.out.b,
            self.sta.o.w,
            self.sta.o.b,
            self.eta.o.w,
            self.eta.o.b,
            self.pair_ff.lin2.w,
            self.pair_ff.lin2.b,
        ]
    }
}

/// One block: sequence branch S → rsa(·,P) → csa → ff ⇒ Sᵉ, then pair
/// branch P → opm(Sᵉ,·) → outgoing → incoming → starting → ending → ff ⇒ Pᵉ.
pub fn stevo_block(
    tape: &mut Tape,
    ps: &ParamSet,
    s: Tensor,
    pair: Tensor,
    p: &BlockParams,
    mut drop: Option<&mut DropoutState>,
) -> (Tensor, Tensor) {
    let s = rsa(tape, ps, s, pair, &p.rsa, drop.as_deref_mut());
    let s = csa(tape, ps, s, &p.csa, drop.as_deref_mut());
    let se = feed_forward(tape, ps, s, &p.seq_ff, drop.as_deref_mut());
    let pr = opm_update(tape, ps, se, pair, &p.opm);
    let pr = triangle_update(tape, ps, pr, TriUpdateMode::Outgoing, &p.otu);
    let pr = triangle_update(tape, ps, pr, TriUpdateMode::Incoming, &p.itu);
    let pr = triangle_attention(tape, ps, pr, TriAttnMode::Starting, &p.sta, drop.as_deref_mut());
    let pr = triangle_attention(tape, ps, pr, TriAttnMode::Ending, &p.eta, drop.as_deref_mut());
    let pe = feed_forward(tape, ps, pr, &p.pair_ff, drop.as_deref_mut());
    (se, pe)
}

/// All learnables of the block stack plus the input embedding.
#[derive(Debug, Clone)]
pub struct StevoParams {
    pub dims: StevoDims,
    pub embed: EmbedParams,
    pub blocks: Vec<BlockParams>,
}

impl StevoParams {
    pub fn init(ps: &mut ParamSet, dims: &StevoDims, joints: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.blocks >= 1, "need at least one block, got {}", dims.blocks);
        assert!(
            dims.d_s % dims.heads == 0 && dims.d_p % dims.heads == 0,
            "widths d_s={} d_p={} must divide into {} heads",
            dims.d_s,
            dims.d_p,
            dims.heads
        );
        let embed = EmbedParams::init(ps, dims.d_s, dims.n_max, joints, rng);
        let blocks = (0..dims.blocks)
            .map(|i| BlockParams::init(ps, &format!("block{i}"), dims, rng))
            .collect();
        Self { dims: dims.clone(), embed, blocks }
    }
}

/// Runs every block in sequence, threading both streams through.
pub fn ste_stack(
    tape: &mut Tape,
    ps: &ParamSet,
    s: Tensor,
    pair: Tensor,
    params: &StevoParams,
    mut drop: Option<&mut DropoutState>,
) -> (Tensor, Tensor) {
    let (mut s, mut pair) = (s, pair);
    for block in &params.blocks {
        let (ns, np) = stevo_block(tape, ps, s, pair, block, drop.as_deref_mut());
        s = ns;
        pair = np;
    }
    (s, pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    /// Random values with magnitude bounded away from zero (random sign,
    /// |v| in [lo, hi]). Finite-difference fixtures use this: an input row
    /// near the origin embeds to a near-zero vector whose layer norm has
    /// an enormous third derivative, so a central difference at eps=1e-4
    /// picks up curvature error even though the analytic gradient is exact.
    fn random_vec_off_zero(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(lo..hi)
            })
            .collect()
    }

    fn zero_params(ps: &mut ParamSet, refs: &[ParamRef]) {
        for &r in refs {
            ps.data_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    // ── embedding ─────────────────────────────────────────────────────────

    #[test]
    fn embed_zero_everything_gives_zero() {
        let mut ps = ParamSet::new();
        let p = EmbedParams::init(&mut ps, 4, 5, 2, &mut rng(0));
        zero_params(&mut ps, &[p.proj.w, p.proj.b, p.pos, p.joint]);
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 3 * 2 * 2], &[3, 2, 2]);
        let s = embed_sequence(&mut tape, &ps, x, &p);
        assert_eq!(tape.shape(s), &[3, 2, 4]);
        assert!(tape.data(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_adds_frame_position_rows() {
        let mut ps = ParamSet::new();
        let p = EmbedParams::init(&mut ps, 3, 4, 2, &mut rng(1));
        zero_params(&mut ps, &[p.proj.w, p.proj.b, p.joint]);
        let pos: Vec<f64> = (0..12).map(|i| i as f64).collect();
        ps.data_mut(p.pos).copy_from_slice(&pos);
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 2 * 2 * 2], &[2, 2, 2]);
        let s = embed_sequence(&mut tape, &ps, x, &p);
        // frame 0 gets row 0 at both joints, frame 1 row 1
        let expect = [0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 4.0, 5.0];
        assert_eq!(tape.data(s), &expect);
    }

    #[test]
    fn embed_shape_contract_at_desk_dims() {
        let mut ps = ParamSet::new();
        let p = EmbedParams::init(&mut ps, 32, 9, 17, &mut rng(2));
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.1; 9 * 17 * 2], &[9, 17, 2]);
        let s = embed_sequence(&mut tape, &ps, x, &p);
        assert_eq!(tape.shape(s), &[9, 17, 32]);
    }

    #[test]
    #[should_panic(expected = "positional table capacity")]
    fn embed_rejects_over_capacity() {
        let mut ps = ParamSet::new();
        let p = EmbedParams::init(&mut ps, 4, 3, 2, &mut rng(3));
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 5 * 2 * 2], &[5, 2, 2]);
        embed_sequence(&mut tape, &ps, x, &p);
    }

    // ── rsa / csa ─────────────────────────────────────────────────────────

    fn attn_fixture(
        d: usize,
        heads: usize,
        pair_dim: Option<usize>,
        gated: bool,
        seed: u64,
    ) -> (ParamSet, AttnParams) {
        let mut ps = ParamSet::new();
        let p = AttnParams::init(&mut ps, "t", d, heads, pair_dim, gated, &mut rng(seed));
        (ps, p)
    }

    #[test]
    fn rsa_zero_pair_bias_equals_vanilla_attention() {
        let (mut ps, p) = attn_fixture(8, 2, Some(4), false, 10);
        zero_params(&mut ps, &[p.pair_bias_w.unwrap()]);
        let mut r = rng(11);
        let s_data = random_vec(&mut r, 3 * 4 * 8, 1.0);
        let pair_data = random_vec(&mut r, 4 * 4 * 4, 1.0);

        let mut tape = Tape::new();
        let s = tape.constant(s_data.clone(), &[3, 4, 8]);
        let pair = tape.constant(pair_data, &[4, 4, 4]);
        let biased = rsa(&mut tape, &ps, s, pair, &p, None);
        // vanilla: same weights, no bias term at all
        let zn = norm(&mut tape, &ps, s, p.ln);
        let core = mha_prenormed(&mut tape, &ps, zn, &p, None);
        let vanilla = tape.add(s, core);
        assert_eq!(tape.data(biased), tape.data(vanilla), "zero bias must be exact");
    }

    #[test]
    fn rsa_single_joint_copies_projected_value() {
        let (ps, p) = attn_fixture(6, 2, Some(3), false, 12);
        let mut r = rng(13);
        let s_data = random_vec(&mut r, 4 * 1 * 6, 1.0);
        let pair_data = random_vec(&mut r, 1 * 1 * 3, 1.0);
        let mut tape = Tape::new();
        let s = tape.constant(s_data, &[4, 1, 6]);
        let pair = tape.constant(pair_data, &[1, 1, 3]);
        let out = rsa(&mut tape, &ps, s, pair, &p, None);
        // J=1: softmax over one key is 1, so output = s + o(v(ln(s)))
        let zn = norm(&mut tape, &ps, s, p.ln);
        let v = lin(&mut tape, &ps, zn, p.v);
        let o = lin(&mut tape, &ps, v, p.o);
        let expect = tape.add(s, o);
        for (a, b) in tape.data(out).iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// Plain-loop attention reimplementation used as an independent oracle.
    /// Shapes: x is [c][d] (one row), returns the full rsa output for that
    /// row including layer norm, per-head split, bias, softmax and residual.
    fn reference_rsa_row(
        x: &[Vec<f64>],
        gamma: &[f64],
        beta: &[f64],
        wq: &[f64],
        bq: &[f64],
        wk: &[f64],
        bk: &[f64],
        wv: &[f64],
        bv: &[f64],
        wo: &[f64],
        bo: &[f64],
        bias: &[Vec<f64>], // [c][c], single head
        d: usize,
    ) -> Vec<Vec<f64>> {
        let c = x.len();
        let ln = |row: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| gamma[i] * (v - mean) * inv + beta[i])
                .collect()
        };
        let matv = |w: &[f64], b: &[f64], v: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|o| (0..d).map(|i| v[i] * w[i * d + o]).sum::<f64>() + b[o])
                .collect()
        };
        let zn: Vec<Vec<f64>> = x.iter().map(|r| ln(r)).collect();
        let q: Vec<Vec<f64>> = zn.iter().map(|r| matv(wq, bq, r)).collect();
        let k: Vec<Vec<f64>> = zn.iter().map(|r| matv(wk, bk, r)).collect();
        let v: Vec<Vec<f64>> = zn.iter().map(|r| matv(wv, bv, r)).collect();
        let mut out = Vec::new();
        for a in 0..c {
            let logits: Vec<f64> = (0..c)
                .map(|b| {
                    let dot: f64 = (0..d).map(|i| q[a][i] * k[b][i]).sum();
                    dot / (d as f64).sqrt() + bias[a][b]
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; d];
            for b in 0..c {
                for i in 0..d {
                    ctx[i] += exps[b] / z * v[b][i];
                }
            }
            let proj = matv(wo, bo, &ctx);
            out.push((0..d).map(|i| x[a][i] + proj[i]).collect());
        }
        out
    }

    #[test]
    fn rsa_matches_independent_reference_small_case() {
        // N=1, J=2, h=1: one width-1 case (layer norm collapses a single
        // channel to its shift, which the reference reproduces) and one
        // width-2 case that exercises real softmax weighting.
        for d in [1usize, 2] {
            let (mut ps, p) = attn_fixture(d, 1, Some(2), false, 20 + d as u64);
            let mut r = rng(30 + d as u64);
            for re in [p.ln.g, p.ln.b, p.q.w, p.q.b, p.k.w, p.k.b, p.v.w, p.v.b, p.o.w, p.o.b] {
                let n = ps.data(re).len();
                ps.data_mut(re).copy_from_slice(&random_vec(&mut r, n, 0.8));
            }
            let s_data = random_vec(&mut r, 2 * d, 1.0);
            let pair_data = random_vec(&mut r, 2 * 2 * 2, 0.7);

            let mut tape = Tape::new();
            let s = tape.constant(s_data.clone(), &[1, 2, d]);
            let pair = tape.constant(pair_data.clone(), &[2, 2, 2]);
            let out = rsa(&mut tape, &ps, s, pair, &p, None);

            // independent bias: logit(a,b) = P[a,b,:] . w_pair
            let wp = ps.data(p.pair_bias_w.unwrap());
            let bias: Vec<Vec<f64>> = (0..2)
                .map(|a| {
                    (0..2)
                        .map(|b| (0..2).map(|c| pair_data[(a * 2 + b) * 2 + c] * wp[c]).sum())
                        .collect()
                })
                .collect();
            let x: Vec<Vec<f64>> = (0..2).map(|j| s_data[j * d..(j + 1) * d].to_vec()).collect();
            let expect = reference_rsa_row(
                &x,
                ps.data(p.ln.g),
                ps.data(p.ln.b),
                ps.data(p.q.w),
                ps.data(p.q.b),
                ps.data(p.k.w),
                ps.data(p.k.b),
                ps.data(p.v.w),
                ps.data(p.v.b),
                ps.data(p.o.w),
                ps.data(p.o.b),
                &bias,
                d,
            );
            let got = tape.data(out);
            for j in 0..2 {
                for i in 0..d {
                    let e = expect[j][i];
                    let g = got[j * d + i];
                    assert!((e - g).abs() < 1e-12, "d={d} joint {j} ch {i}: {e} vs {g}");
                }
            }
        }
    }

    #[test]
    fn csa_single_frame_copies_projected_value() {
        let (ps, p) = attn_fixture(6, 3, None, false, 40);
        let mut r = rng(41);
        let s_data = random_vec(&mut r, 1 * 5 * 6, 1.0);
        let mut tape = Tape::new();
        let s = tape.constant(s_data, &[1, 5, 6]);
        let out = csa(&mut tape, &ps, s, &p, None);
        let zn = norm(&mut tape, &ps, s, p.ln);
        let v = lin(&mut tape, &ps, zn, p.v);
        let o = lin(&mut tape, &ps, v, p.o);
        let expect = tape.add(s, o);
        for (a, b) in tape.data(out).iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn csa_is_joint_equivariant() {
        let (ps, p) = attn_fixture(4, 2, None, false, 42);
        let mut r = rng(43);
        let (n, j, d) = (3, 4, 4);
        let s_data = random_vec(&mut r, n * j * d, 1.0);
        // permute joints by rotation
        let perm = [2usize, 0, 3, 1];
        let mut s_perm = vec![0.0; s_data.len()];
        for t in 0..n {
            for src in 0..j {
                let dst = perm[src];
                s_perm[(t * j + dst) * d..(t * j + dst + 1) * d]
                    .copy_from_slice(&s_data[(t * j + src) * d..(t * j + src + 1) * d]);
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(s_data, &[n, j, d]);
        let b = tape.constant(s_perm, &[n, j, d]);
        let oa = csa(&mut tape, &ps, a, &p, None);
        let ob = csa(&mut tape, &ps, b, &p, None);
        let (da, db) = (tape.data(oa), tape.data(ob));
        for t in 0..n {
            for src in 0..j {
                let dst = perm[src];
                assert_eq!(
                    &da[(t * j + src) * d..(t * j + src + 1) * d],
                    &db[(t * j + dst) * d..(t * j + dst + 1) * d],
                    "joint permutation must commute with csa"
                );
            }
        }
    }

    #[test]
    fn csa_constant_in_time_stays_constant() {
        let (ps, p) = attn_fixture(4, 2, None, false, 44);
        let mut r = rng(45);
        let frame = random_vec(&mut r, 2 * 4, 1.0);
        let mut s_data = Vec::new();
        for _ in 0..3 {
            s_data.extend_from_slice(&frame);
        }
        let mut tape = Tape::new();
        let s = tape.constant(s_data, &[3, 2, 4]);
        let out = csa(&mut tape, &ps, s, &p, None);
        let d = tape.data(out);
        let f0 = &d[..2 * 4];
        for t in 1..3 {
            for (a, b) in f0.iter().zip(&d[t * 8..(t + 1) * 8]) {
                assert!((a - b).abs() < 1e-12, "time-constant input must stay constant");
            }
        }
    }

    // ── outer product mean ────────────────────────────────────────────────

    #[test]
    fn opm_scalar_outer_product() {
        let mut ps = ParamSet::new();
        let p = OpmParams::init(&mut ps, "opm", 1, 1, 1, &mut rng(50));
        // identity projections, pass-through output
        ps.data_mut(p.a.w)[0] = 1.0;
        ps.data_mut(p.a.b)[0] = 0.0;
        ps.data_mut(p.b.w)[0] = 1.0;
        ps.data_mut(p.b.b)[0] = 0.0;
        let mut tape = Tape::new();
        let se = tape.constant(vec![2.0, 3.0], &[1, 2, 1]);
        let a = lin(&mut tape, &ps, se, p.a);
        let b = lin(&mut tape, &ps, se, p.b);
        let f = outer_product_mean(&mut tape, a, b);
        assert_eq!(tape.shape(f), &[2, 2, 1, 1]);
        // F[0,1] = 2*3
        assert_eq!(tape.data(f), &[4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn opm_tied_projections_give_transpose_symmetry() {
        let mut tape = Tape::new();
        let mut r = rng(51);
        let (n, j, d) = (3, 4, 2);
        let a_data = random_vec(&mut r, n * j * d, 1.0);
        let a = tape.constant(a_data.clone(), &[n, j, d]);
        let b = tape.constant(a_data, &[n, j, d]);
        let f = outer_product_mean(&mut tape, a, b);
        let fd = tape.data(f);
        let idx = |i: usize, jj: usize, p: usize, q: usize| ((i * j + jj) * d + p) * d + q;
        for i in 0..j {
            for jj in 0..j {
                for p in 0..d {
                    for q in 0..d {
                        assert_eq!(fd[idx(i, jj, p, q)], fd[idx(jj, i, q, p)]);
                    }
                }
            }
        }
    }

    #[test]
    fn opm_matches_brute_force_average() {
        let mut r = rng(52);
        for trial in 0..20 {
            let n = r.gen_range(1..=8);
            let j = r.gen_range(1..=6);
            let d = r.gen_range(1..=4);
            let a_data = random_vec(&mut r, n * j * d, 1.5);
            let b_data = random_vec(&mut r, n * j * d, 1.5);
            let mut tape = Tape::new();
            let a = tape.constant(a_data.clone(), &[n, j, d]);
            let b = tape.constant(b_data.clone(), &[n, j, d]);
            let f = outer_product_mean(&mut tape, a, b);
            let fd = tape.data(f);
            for i in 0..j {
                for jj in 0..j {
                    for p in 0..d {
                        for q in 0..d {
                            let mut sum = 0.0;
                            for t in 0..n {
                                sum += a_data[(t * j + i) * d + p] * b_data[(t * j + jj) * d + q];
                            }
                            let expect = sum / n as f64;
                            let got = fd[((i * j + jj) * d + p) * d + q];
                            let rel = (expect - got).abs() / expect.abs().max(1.0);
                            assert!(rel < 1e-12, "trial {trial} ({i},{jj},{p},{q}): {expect} vs {got}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn opm_update_with_zero_output_is_identity() {
        let mut ps = ParamSet::new();
        let p = OpmParams::init(&mut ps, "opm", 4, 2, 3, &mut rng(53));
        zero_params(&mut ps, &[p.out.w, p.out.b]);
        let mut r = rng(54);
        let mut tape = Tape::new();
        let se = tape.constant(random_vec(&mut r, 2 * 3 * 4, 1.0), &[2, 3, 4]);
        let pair_data = random_vec(&mut r, 3 * 3 * 3, 1.0);
        let pair = tape.constant(pair_data.clone(), &[3, 3, 3]);
        let out = opm_update(&mut tape, &ps, se, pair, &p);
        assert_eq!(tape.data(out), &pair_data[..]);
    }

    // ── triangle updates ──────────────────────────────────────────────────

    #[test]
    fn triangle_update_zero_projection_is_identity() {
        for mode in [TriUpdateMode::Outgoing, TriUpdateMode::Incoming] {
            let mut ps = ParamSet::new();
            let p = TriUpdateParams::init(&mut ps, "tri", 3, &mut rng(60));
            zero_params(&mut ps, &[p.out.w, p.out.b]);
            let mut r = rng(61);
            let pair_data = random_vec(&mut r, 4 * 4 * 3, 1.0);
            let mut tape = Tape::new();
            let pair = tape.constant(pair_data.clone(), &[4, 4, 3]);
            let out = triangle_update(&mut tape, &ps, pair, mode, &p);
            assert_eq!(tape.data(out), &pair_data[..], "{mode:?}");
        }
    }

    /// Independent plain-loop evaluation of the triangular update.
    fn reference_triangle_update(
        pair: &[f64],
        j: usize,
        d: usize,
        ps: &ParamSet,
        p: &TriUpdateParams,
        mode: TriUpdateMode,
    ) -> Vec<f64> {
        let ln = |row: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(i, v)| g[i] * (v - mean) * inv + b[i]).collect()
        };
        let matv = |w: &[f64], b: &[f64], v: &[f64]| -> Vec<f64> {
            (0..d).map(|o| (0..d).map(|i| v[i] * w[i * d + o]).sum::<f64>() + b[o]).collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let cell = |i: usize, k: usize| &pair[(i * j + k) * d..(i * j + k + 1) * d];
        let gated = |z: &[f64], val: LinPair, gate: LinPair| -> Vec<f64> {
            let v = matv(ps.data(val.w), ps.data(val.b), z);
            let g = matv(ps.data(gate.w), ps.data(gate.b), z);
            v.iter().zip(&g).map(|(x, y)| x * sig(*y)).collect()
        };
        let z: Vec<Vec<f64>> = (0..j * j)
            .map(|c| ln(&pair[c * d..(c + 1) * d], ps.data(p.ln_in.g), ps.data(p.ln_in.b)))
            .collect();
        let _ = cell;
        let mut out = vec![0.0; j * j * d];
        for i in 0..j {
            for jj in 0..j {
                let mut u = vec![0.0; d];
                for k in 0..j {
                    let (za, zb) = match mode {
                        TriUpdateMode::Outgoing => (&z[i * j + k], &z[jj * j + k]),
                        TriUpdateMode::Incoming => (&z[k * j + i], &z[k * j + jj]),
                    };
                    let a = gated(za, p.a, p.a_gate);
                    let b = gated(zb, p.b, p.b_gate);
                    for c in 0..d {
                        u[c] += a[c] * b[c];
                    }
                }
                let un = ln(&u, ps.data(p.ln_u.g), ps.data(p.ln_u.b));
                let proj = matv(ps.data(p.out.w), ps.data(p.out.b), &un);
                let g = matv(ps.data(p.out_gate.w), ps.data(p.out_gate.b), &z[i * j + jj]);
                for c in 0..d {
                    out[(i * j + jj) * d + c] = pair[(i * j + jj) * d + c] + sig(g[c]) * proj[c];
                }
            }
        }
        out
    }

    #[test]
    fn triangle_update_matches_reference() {
        for (jj, mode) in [(1usize, TriUpdateMode::Outgoing), (3, TriUpdateMode::Outgoing), (3, TriUpdateMode::Incoming)] {
            let d = 2;
            let mut ps = ParamSet::new();
            let p = TriUpdateParams::init(&mut ps, "tri", d, &mut rng(62));
            let mut r = rng(63);
            let pair_data = random_vec(&mut r, jj * jj * d, 1.0);
            let mut tape = Tape::new();
            let pair = tape.constant(pair_data.clone(), &[jj, jj, d]);
            let out = triangle_update(&mut tape, &ps, pair, mode, &p);
            let expect = reference_triangle_update(&pair_data, jj, d, &ps, &p, mode);
            for (a, b) in tape.data(out).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "J={jj} {mode:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn triangle_update_transpose_duality() {
        // incoming on transposed input, transposed back, equals outgoing
        // with the roles of a and b swapped
        let d = 3;
        let j = 3;
        let mut ps = ParamSet::new();
        let p = TriUpdateParams::init(&mut ps, "tri", d, &mut rng(64));
        let swapped = TriUpdateParams {
            a: p.b,
            a_gate: p.b_gate,
            b: p.a,
            b_gate: p.a_gate,
            ..p.clone()
        };
        let mut r = rng(65);
        let pair_data = random_vec(&mut r, j * j * d, 1.0);
        let mut tape = Tape::new();
        let pair = tape.constant(pair_data.clone(), &[j, j, d]);
        let outgoing = triangle_update(&mut tape, &ps, pair, TriUpdateMode::Outgoing, &p);

        let pair_t = tape.permute(pair, &[1, 0, 2]);
        let incoming_t = triangle_update(&mut tape, &ps, pair_t, TriUpdateMode::Incoming, &swapped);
        let back = tape.permute(incoming_t, &[1, 0, 2]);
        // residual uses the transposed map, which transposes back exactly
        for (a, b) in tape.data(outgoing).iter().zip(tape.data(back)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    // ── triangle attention ────────────────────────────────────────────────

    #[test]
    fn triangle_attention_closed_gate_is_identity() {
        for mode in [TriAttnMode::Starting, TriAttnMode::Ending] {
            let mut ps = ParamSet::new();
            let p = AttnParams::init(&mut ps, "tri", 4, 2, Some(4), true, &mut rng(70));
            let gate = p.gate.unwrap();
            zero_params(&mut ps, &[gate.w]);
            ps.data_mut(gate.b).iter_mut().for_each(|v| *v = -40.0);
            let mut r = rng(71);
            let pair_data = random_vec(&mut r, 3 * 3 * 4, 1.0);
            let mut tape = Tape::new();
            let pair = tape.constant(pair_data.clone(), &[3, 3, 4]);
            let out = triangle_attention(&mut tape, &ps, pair, mode, &p, None);
            for (a, b) in tape.data(out).iter().zip(&pair_data) {
                assert!((a - b).abs() < 1e-9, "{mode:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn triangle_attention_single_pair_closed_form() {
        let d = 2;
        let mut ps = ParamSet::new();
        let p = AttnParams::init(&mut ps, "tri", d, 1, Some(d), true, &mut rng(72));
        let mut r = rng(73);
        let pair_data = random_vec(&mut r, d, 1.0);
        let mut tape = Tape::new();
        let pair = tape.constant(pair_data.clone(), &[1, 1, d]);
        let out = triangle_attention(&mut tape, &ps, pair, TriAttnMode::Starting, &p, None);
        // J=1: the only attention weight is 1, so
        // out = P + sigmoid(lin_gate(zn)) * lin_o(lin_v(zn))
        let zn = norm(&mut tape, &ps, pair, p.ln);
        let v = lin(&mut tape, &ps, zn, p.v);
        let o = lin(&mut tape, &ps, v, p.o);
        let g = lin(&mut tape, &ps, zn, p.gate.unwrap());
        let g = tape.sigmoid(g);
        let upd = tape.mul(g, o);
        let expect = tape.add(pair, upd);
        for (a, b) in tape.data(out).iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// Independent evaluation of starting-mode triangular attention for a
    /// single head, including bias from the normed map and output gating.
    fn reference_triangle_attention_starting(
        pair: &[f64],
        j: usize,
        d: usize,
        ps: &ParamSet,
        p: &AttnParams,
    ) -> Vec<f64> {
        let ln = |row: &[f64]| -> Vec<f64> {
            let g = ps.data(p.ln.g);
            let b = ps.data(p.ln.b);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(i, v)| g[i] * (v - mean) * inv + b[i]).collect()
        };
        let matv = |w: &[f64], b: &[f64], v: &[f64]| -> Vec<f64> {
            (0..d).map(|o| (0..d).map(|i| v[i] * w[i * d + o]).sum::<f64>() + b[o]).collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z: Vec<Vec<f64>> = (0..j * j).map(|c| ln(&pair[c * d..(c + 1) * d])).collect();
        let wp = ps.data(p.pair_bias_w.unwrap());
        let gate = p.gate.unwrap();
        let mut out = vec![0.0; j * j * d];
        for i in 0..j {
            let q: Vec<Vec<f64>> =
                (0..j).map(|c| matv(ps.data(p.q.w), ps.data(p.q.b), &z[i * j + c])).collect();
            let k: Vec<Vec<f64>> =
                (0..j).map(|c| matv(ps.data(p.k.w), ps.data(p.k.b), &z[i * j + c])).collect();
            let v: Vec<Vec<f64>> =
                (0..j).map(|c| matv(ps.data(p.v.w), ps.data(p.v.b), &z[i * j + c])).collect();
            for a in 0..j {
                let logits: Vec<f64> = (0..j)
                    .map(|b| {
                        let dot: f64 = (0..d).map(|c| q[a][c] * k[b][c]).sum();
                        // bias from the normed map at (query a, key b)
                        let bias: f64 = (0..d).map(|c| z[a * j + b][c] * wp[c]).sum();
                        dot / (d as f64).sqrt() + bias
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let zsum: f64 = exps.iter().sum();
                let mut ctx = vec![0.0; d];
                for b in 0..j {
                    for c in 0..d {
                        ctx[c] += exps[b] / zsum * v[b][c];
                    }
                }
                let proj = matv(ps.data(p.o.w), ps.data(p.o.b), &ctx);
                let gv = matv(ps.data(gate.w), ps.data(gate.b), &z[i * j + a]);
                for c in 0..d {
                    out[(i * j + a) * d + c] = pair[(i * j + a) * d + c] + sig(gv[c]) * proj[c];
                }
            }
        }
        out
    }

    #[test]
    fn triangle_attention_matches_reference() {
        let (j, d) = (2, 2);
        let mut ps = ParamSet::new();
        let p = AttnParams::init(&mut ps, "tri", d, 1, Some(d), true, &mut rng(74));
        let mut r = rng(75);
        let pair_data = random_vec(&mut r, j * j * d, 1.0);
        let mut tape = Tape::new();
        let pair = tape.constant(pair_data.clone(), &[j, j, d]);
        let out = triangle_attention(&mut tape, &ps, pair, TriAttnMode::Starting, &p, None);
        let expect = reference_triangle_attention_starting(&pair_data, j, d, &ps, &p);
        for (a, b) in tape.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // ending mode: run the reference on the transposed map and
        // transpose its result back
        let out_e = triangle_attention(&mut tape, &ps, pair, TriAttnMode::Ending, &p, None);
        let mut pair_t = vec![0.0; pair_data.len()];
        for a in 0..j {
            for b in 0..j {
                for c in 0..d {
                    pair_t[(b * j + a) * d + c] = pair_data[(a * j + b) * d + c];
                }
            }
        }
        let expect_t = reference_triangle_attention_starting(&pair_t, j, d, &ps, &p);
        let got = tape.data(out_e);
        for a in 0..j {
            for b in 0..j {
                for c in 0..d {
                    let e = expect_t[(b * j + a) * d + c];
                    let g = got[(a * j + b) * d + c];
                    assert!((e - g).abs() < 1e-12, "({a},{b},{c}): {e} vs {g}");
                }
            }
        }
    }

    // ── block and stack ───────────────────────────────────────────────────

    fn block_fixture(seed: u64) -> (ParamSet, BlockParams, StevoDims) {
        let dims = StevoDims { blocks: 1, heads: 2, d_s: 4, d_p: 4, d_o: 2, n_max: 8 };
        let mut ps = ParamSet::new();
        let p = BlockParams::init(&mut ps, "block0", &dims, &mut rng(seed));
        (ps, p, dims)
    }

    #[test]
    fn block_zeroed_projections_is_pure_residual() {
        let (mut ps, p, _) = block_fixture(80);
        zero_params(&mut ps, &p.output_projections());
        let mut r = rng(81);
        let s_data = random_vec(&mut r, 3 * 3 * 4, 1.0);
        let pair_data = random_vec(&mut r, 3 * 3 * 4, 1.0);
        let mut tape = Tape::new();
        let s = tape.constant(s_data.clone(), &[3, 3, 4]);
        let pair = tape.constant(pair_data.clone(), &[3, 3, 4]);
        let (se, pe) = stevo_block(&mut tape, &ps, s, pair, &p, None);
        assert_eq!(tape.data(se), &s_data[..]);
        assert_eq!(tape.data(pe), &pair_data[..]);
    }

    #[test]
    fn block_preserves_shapes_at_desk_dims() {
        let dims = StevoDims::desk(9);
        let mut ps = ParamSet::new();
        let p = BlockParams::init(&mut ps, "block0", &dims, &mut rng(82));
        let mut r = rng(83);
        let mut tape = Tape::new();
        let s = tape.constant(random_vec(&mut r, 9 * 17 * 32, 1.0), &[9, 17, 32]);
        let pair = tape.constant(random_vec(&mut r, 17 * 17 * 16, 1.0), &[17, 17, 16]);
        let (se, pe) = stevo_block(&mut tape, &ps, s, pair, &p, None);
        assert_eq!(tape.shape(se), &[9, 17, 32]);
        assert_eq!(tape.shape(pe), &[17, 17, 16]);
    }

    #[test]
    fn block_passes_gradient_check() {
        let (ps, p, _) = block_fixture(84);
        let mut r = rng(85);
        let s_data = random_vec(&mut r, 2 * 3 * 4, 0.8);
        let pair_data = random_vec(&mut r, 3 * 3 * 4, 0.8);
        let (err, worst) = grad_check_params(
            &ps,
            |tape, ps| {
                let s = tape.constant(s_data.clone(), &[2, 3, 4]);
                let pair = tape.constant(pair_data.clone(), &[3, 3, 4]);
                let (se, pe) = stevo_block(tape, ps, s, pair, &p, None);
                let se2 = tape.mul(se, se);
                let pe2 = tape.mul(pe, pe);
                let a = tape.sum_all(se2);
                let b = tape.sum_all(pe2);
                tape.add(a, b)
            },
            1e-4,
        );
        assert!(err < 1e-5, "worst relative error {err:.3e} at {worst}");
    }

    #[test]
    fn stack_one_block_equals_single_block_call() {
        let dims = StevoDims { blocks: 1, heads: 2, d_s: 4, d_p: 4, d_o: 2, n_max: 8 };
        let mut ps = ParamSet::new();
        let params = StevoParams::init(&mut ps, &dims, 2, &mut rng(86));
        let mut r = rng(87);
        let s_data = random_vec(&mut r, 3 * 2 * 4, 1.0);
        let pair_data = random_vec(&mut r, 2 * 2 * 4, 1.0);
        let mut tape = Tape::new();
        let s = tape.constant(s_data, &[3, 2, 4]);
        let pair = tape.constant(pair_data, &[2, 2, 4]);
        let (a_s, a_p) = ste_stack(&mut tape, &ps, s, pair, &params, None);
        let (b_s, b_p) = stevo_block(&mut tape, &ps, s, pair, &params.blocks[0], None);
        assert_eq!(tape.data(a_s), tape.data(b_s));
        assert_eq!(tape.data(a_p), tape.data(b_p));
    }

    #[test]
    fn stack_zeroed_second_block_equals_first_block() {
        let dims = StevoDims { blocks: 2, heads: 2, d_s: 4, d_p: 4, d_o: 2, n_max: 8 };
        let mut ps = ParamSet::new();
        let params = StevoParams::init(&mut ps, &dims, 2, &mut rng(88));
        zero_params(&mut ps, &params.blocks[1].output_projections());
        let mut r = rng(89);
        let s_data = random_vec(&mut r, 3 * 2 * 4, 1.0);
        let pair_data = random_vec(&mut r, 2 * 2 * 4, 1.0);
        let mut tape = Tape::new();
        let s = tape.constant(s_data, &[3, 2, 4]);
        let pair = tape.constant(pair_data, &[2, 2, 4]);
        let (a_s, a_p) = ste_stack(&mut tape, &ps, s, pair, &params, None);
        let (b_s, b_p) = stevo_block(&mut tape, &ps, s, pair, &params.blocks[0], None);
        assert_eq!(tape.data(a_s), tape.data(b_s));
        assert_eq!(tape.data(a_p), tape.data(b_p));
    }

    #[test]
    fn stack_is_deterministic() {
        let dims = StevoDims { blocks: 2, heads: 2, d_s: 4, d_p: 4, d_o: 2, n_max: 8 };
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut ps = ParamSet::new();
            let params = StevoParams::init(&mut ps, &dims, 2, &mut rng(90));
            let mut r = rng(91);
            let s_data = random_vec(&mut r, 3 * 2 * 4, 1.0);
            let pair_data = random_vec(&mut r, 2 * 2 * 4, 1.0);
            let mut tape = Tape::new();
            let s = tape.constant(s_data, &[3, 2, 4]);
            let pair = tape.constant(pair_data, &[2, 2, 4]);
            let (se, pe) = ste_stack(&mut tape, &ps, s, pair, &params, None);
            (tape.data(se).to_vec(), tape.data(pe).to_vec())
        };
        assert_eq!(run(), run(), "same seeds must reproduce bit-identical outputs");
    }

    #[test]
    fn stack_end_to_end_gradient_check() {
        // Width 4+ everywhere (a 2-channel layer norm can have near-zero row
        // variance) and inputs bounded away from zero keep the layer norms
        // well conditioned. The step is 1e-5 rather than the 1e-4 used for
        // single blocks: stacking two blocks feeds the pair-product update
        // into a second round of attention, which multiplies up the third
        // derivative of the probe, and central-difference truncation error
        // grows with the curvature-to-gradient ratio. f64 rounding noise at
        // this step stays four orders of magnitude below the threshold, and
        // the numeric values converge onto the analytic ones as the step
        // shrinks further.
        let dims = StevoDims { blocks: 2, heads: 2, d_s: 8, d_p: 4, d_o: 2, n_max: 8 };
        let mut ps = ParamSet::new();
        let params = StevoParams::init(&mut ps, &dims, 2, &mut rng(92));
        let mut r = rng(93);
        let x_data = random_vec_off_zero(&mut r, 3 * 2 * 2, 0.4, 1.0);
        let pair_data = random_vec_off_zero(&mut r, 2 * 2 * 4, 0.4, 1.0);
        let (err, worst) = grad_check_params(
            &ps,
            |tape, ps| {
                let x = tape.constant(x_data.clone(), &[3, 2, 2]);
                let s = embed_sequence(tape, ps, x, &params.embed);
                let pair = tape.constant(pair_data.clone(), &[2, 2, 4]);
                let (se, pe) = ste_stack(tape, ps, s, pair, &params, None);
                let se2 = tape.mul(se, se);
                let pe2 = tape.mul(pe, pe);
                let a = tape.sum_all(se2);
                let b = tape.sum_all(pe2);
                tape.add(a, b)
            },
            1e-5,
        );
        assert!(err < 1e-5, "worst relative error {err:.3e} at {worst}");
    }

    #[test]
    fn dropout_changes_training_output_but_not_inference() {
        let (ps, p, _) = block_fixture(94);
        let mut r = rng(95);
        let s_data = random_vec(&mut r, 3 * 3 * 4, 1.0);
        let pair_data = random_vec(&mut r, 3 * 3 * 4, 1.0);
        let run = |drop: Option<(f64, u64)>| -> Vec<f64> {
            let mut tape = Tape::new();
            let s = tape.constant(s_data.clone(), &[3, 3, 4]);
            let pair = tape.constant(pair_data.clone(), &[3, 3, 4]);
            let mut state = drop.map(|(rate, seed)| DropoutState { rate, rng: rng(seed) });
            let (se, _) = stevo_block(&mut tape, &ps, s, pair, &p, state.as_mut());
            tape.data(se).to_vec()
        };
        let clean = run(None);
        assert_eq!(clean, run(None));
        let noisy = run(Some((0.5, 1)));
        assert_ne!(clean, noisy, "dropout must perturb the forward pass");
        assert_eq!(noisy, run(Some((0.5, 1))), "dropout must be seed-deterministic");
    }
}
