//! Tape-based reverse-mode autodiff over row-major `f64` buffers.
//!
//! Every operation records a node holding its output data, shape and an op
//! tag pointing at its inputs. `backward` walks the tape in reverse creation
//! order (creation order is already topological) and accumulates gradients
//! into every node that transitively depends on a differentiable leaf.
//!
//! Shapes are explicit: the only implicit broadcasting is in [`Tape::add`],
//! where the right operand may broadcast against the left under the usual
//! left-padded-ones rule (bias vectors, shared pair biases, per-frame
//! embeddings). Everything else requires exact shapes and panics with both
//! shapes named otherwise.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_params};

use crate::params::{ParamRef, ParamSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Variance guard added inside layer norm's square root. Kept tiny so that
/// an input which is already zero-mean/unit-variance passes through
/// unchanged to well below test tolerances, while exactly-constant inputs
/// still map to the shift parameter instead of NaN.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to one node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Bmm { a: usize, b: usize, tb: bool },
    Permute { x: usize, axes: Vec<usize> },
    Reshape { x: usize },
    SliceAxis0 { x: usize, start: usize },
    SoftmaxLast { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    EuclidMeanRows { x: usize, squared: bool },
    DiffAxis0 { x: usize },
    // The principal point shifts every output by a constant, so only the
    // focal lengths survive into the backward pass.
    PinholeProject { x: usize, fx: f64, fy: f64 },
    Dropout { x: usize, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Growing record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Tensor>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        st[d] = st[d + 1] * shape[d + 1];
    }
    st
}

/// Strides for reading `b_shape` under broadcast against `a_shape`
/// (left-padded with ones, size-1 dims stride 0). `None` if incompatible.
fn broadcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let pad = a_shape.len() - b_shape.len();
    let bst = contiguous_strides(b_shape);
    let mut out = vec![0usize; a_shape.len()];
    for d in 0..a_shape.len() {
        if d < pad {
            continue;
        }
        let bd = b_shape[d - pad];
        if bd == a_shape[d] {
            out[d] = bst[d - pad];
        } else if bd != 1 {
            return None;
        }
    }
    Some(out)
}

// ── matrix kernels (all accumulate into `out`) ────────────────────────────

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

fn mm_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize, out: &mut [f64]) {
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    assert_eq!(axes.len(), nd, "permute: axes {:?} do not match shape {:?}", axes, shape);
    let mut seen = vec![false; nd];
    for &a in axes {
        assert!(a < nd && !seen[a], "permute: invalid axes {:?} for shape {:?}", axes, shape);
        seen[a] = true;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = contiguous_strides(shape);
    let mut out = vec![0.0; data.len()];
    let mut coord = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut idx = 0;
        for d in 0..nd {
            idx += coord[d] * in_strides[axes[d]];
        }
        *slot = data[idx];
        for d in (0..nd).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_val(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node { data, shape, grad: None, op, needs_grad });
        Tensor(self.nodes.len() - 1)
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Non-differentiable leaf (inputs, targets, fixed tables).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "constant: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "var: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape.to_vec(), Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.constant(vec![v], &[1])
    }

    /// Binds a parameter as a differentiable leaf, once per tape.
    pub fn param(&mut self, ps: &ParamSet, r: ParamRef) -> Tensor {
        if self.bound.len() < ps.len() {
            self.bound.resize(ps.len(), None);
        }
        if let Some(t) = self.bound[r.index()] {
            return t;
        }
        let t = self.var(ps.data(r).to_vec(), ps.shape(r));
        self.bound[r.index()] = Some(t);
        t
    }

    /// Gradient of the loss w.r.t. a bound parameter; `None` if the
    /// parameter was never bound on this tape.
    pub fn param_grad(&self, r: ParamRef) -> Option<&[f64]> {
        let t = (*self.bound.get(r.index())?)?;
        self.grad(t)
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Scalar value convenience accessor.
    pub fn value(&self, t: Tensor) -> f64 {
        assert_eq!(
            self.nodes[t.0].data.len(),
            1,
            "value: tensor has shape {:?}, expected a scalar",
            self.nodes[t.0].shape
        );
        self.nodes[t.0].data[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    // ── elementwise and broadcast arithmetic ──────────────────────────────

    /// `a + b`; `b` may broadcast against `a` (left-padded ones rule).
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let strides = broadcast_strides(&ash, &bsh).unwrap_or_else(|| {
            panic!("add: cannot broadcast shape {:?} onto {:?}", bsh, ash)
        });
        let an = numel(&ash);
        let mut out = vec![0.0; an];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        if ash == bsh {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = x + y;
            }
        } else if ash.len() >= bsh.len() && ash[ash.len() - bsh.len()..] == bsh[..] {
            // suffix broadcast: cyclic repeat
            let bn = bd.len();
            for (i, (o, &x)) in out.iter_mut().zip(ad).enumerate() {
                *o = x + bd[i % bn];
            }
        } else {
            let mut coord = vec![0usize; ash.len()];
            for (o, &x) in out.iter_mut().zip(ad) {
                let mut bi = 0;
                for d in 0..ash.len() {
                    bi += coord[d] * strides[d];
                }
                *o = x + bd[bi];
                for d in (0..ash.len()).rev() {
                    coord[d] += 1;
                    if coord[d] < ash[d] {
                        break;
                    }
                    coord[d] = 0;
                }
            }
        }
        let ng = self.wants(a.0) || self.wants(b.0);
        self.push(out, ash, Op::Add { a: a.0, b: b.0 }, ng)
    }

    /// `a - b`, exact same shapes.
    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "sub: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let sh = self.shape(a).to_vec();
        let ng = self.wants(a.0) || self.wants(b.0);
        self.push(out, sh, Op::Sub { a: a.0, b: b.0 }, ng)
    }

    /// Elementwise product, exact same shapes.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mul: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let sh = self.shape(a).to_vec();
        let ng = self.wants(a.0) || self.wants(b.0);
        self.push(out, sh, Op::Mul { a: a.0, b: b.0 }, ng)
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let sh = self.shape(x).to_vec();
        let ng = self.wants(x.0);
        self.push(out, sh, Op::Scale { x: x.0, c }, ng)
    }

    // ── matrix products ───────────────────────────────────────────────────

    /// 2D product with optional transposes (`ta && tb` unsupported).
    pub fn matmul(&mut self, a: Tensor, b: Tensor, ta: bool, tb: bool) -> Tensor {
        assert!(!(ta && tb), "matmul: double transpose is not supported");
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            ash.len() == 2 && bsh.len() == 2,
            "matmul: expects 2D operands, got {:?} and {:?}",
            ash,
            bsh
        );
        let (m, k) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
        let (kb, n) = if tb { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        assert_eq!(
            k, kb,
            "matmul: inner dimensions do not match (lhs {:?} ta={}, rhs {:?} tb={})",
            ash, ta, bsh, tb
        );
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        match (ta, tb) {
            (false, false) => mm_nn(ad, bd, m, k, n, &mut out),
            (false, true) => mm_nt(ad, bd, m, k, n, &mut out),
            (true, false) => mm_tn(ad, bd, k, m, n, &mut out),
            (true, true) => unreachable!(),
        }
        let ng = self.wants(a.0) || self.wants(b.0);
        self.push(out, vec![m, n], Op::MatMul { a: a.0, b: b.0, ta, tb }, ng)
    }

    /// Batched 3D product `[B,m,k] x [B,k,n]`; `tb` treats `b` as `[B,n,k]`.
    pub fn bmm(&mut self, a: Tensor, b: Tensor, tb: bool) -> Tensor {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            ash.len() == 3 && bsh.len() == 3 && ash[0] == bsh[0],
            "bmm: expects matching 3D batches, got {:?} and {:?}",
            ash,
            bsh
        );
        let (bt, m, k) = (ash[0], ash[1], ash[2]);
        let (kb, n) = if tb { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        assert_eq!(
            k, kb,
            "bmm: inner dimensions do not match (lhs {:?}, rhs {:?} tb={})",
            ash, bsh, tb
        );
        let mut out = vec![0.0; bt * m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..bt {
            let asl = &ad[i * m * k..(i + 1) * m * k];
            let bsl = &bd[i * k * n..(i + 1) * k * n];
            let osl = &mut out[i * m * n..(i + 1) * m * n];
            if tb {
                mm_nt(asl, bsl, m, k, n, osl);
            } else {
                mm_nn(asl, bsl, m, k, n, osl);
            }
        }
        let ng = self.wants(a.0) || self.wants(b.0);
        self.push(out, vec![bt, m, n], Op::Bmm { a: a.0, b: b.0, tb }, ng)
    }

    // ── shape movement ────────────────────────────────────────────────────

    pub fn permute(&mut self, x: Tensor, axes: &[usize]) -> Tensor {
        let (out, sh) = permute_copy(&self.nodes[x.0].data, &self.nodes[x.0].shape, axes);
        let ng = self.wants(x.0);
        self.push(out, sh, Op::Permute { x: x.0, axes: axes.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.nodes[x.0].data.len(),
            numel(shape),
            "reshape: cannot view shape {:?} as {:?}",
            self.nodes[x.0].shape,
            shape
        );
        let out = self.nodes[x.0].data.clone();
        let ng = self.wants(x.0);
        self.push(out, shape.to_vec(), Op::Reshape { x: x.0 }, ng)
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_axis0(&mut self, x: Tensor, start: usize, len: usize) -> Tensor {
        let sh = self.shape(x).to_vec();
        assert!(!sh.is_empty() && start + len <= sh[0],
            "slice_axis0: range {start}..{} out of bounds for shape {:?}", start + len, sh);
        let row = numel(&sh[1..]);
        let out = self.nodes[x.0].data[start * row..(start + len) * row].to_vec();
        let mut osh = sh;
        osh[0] = len;
        let ng = self.wants(x.0);
        self.push(out, osh, Op::SliceAxis0 { x: x.0, start }, ng)
    }

    // ── nonlinearities and normalization ──────────────────────────────────

    /// Numerically stable softmax over the last axis. Rejects non-finite
    /// input (a NaN would silently poison every downstream gradient).
    pub fn softmax_last(&mut self, x: Tensor) -> Tensor {
        let sh = self.shape(x).to_vec();
        let c = *sh.last().expect("softmax_last: scalar input has no axis");
        let xd = &self.nodes[x.0].data;
        assert!(
            xd.iter().all(|v| v.is_finite()),
            "softmax_last: non-finite input value"
        );
        let mut out = vec![0.0; xd.len()];
        for (orow, xrow) in out.chunks_mut(c).zip(xd.chunks(c)) {
            let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let ng = self.wants(x.0);
        self.push(out, sh, Op::SoftmaxLast { x: x.0 }, ng)
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor {
        let sh = self.shape(x).to_vec();
        let c = *sh.last().expect("layer_norm: scalar input has no axis");
        assert!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "layer_norm: affine shapes {:?}/{:?} do not match feature dim {} of {:?}",
            self.shape(gamma),
            self.shape(beta),
            c,
            sh
        );
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![0.0; xd.len()];
        for (orow, xrow) in out.chunks_mut(c).zip(xd.chunks(c)) {
            let mean = xrow.iter().sum::<f64>() / c as f64;
            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
                *o = (v - mean) * inv * gd[j] + bd[j];
            }
        }
        let ng = self.wants(x.0) || self.wants(gamma.0) || self.wants(beta.0);
        self.push(out, sh, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 }, ng)
    }

    pub fn gelu(&mut self, x: Tensor) -> Tensor {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_val(v)).collect();
        let sh = self.shape(x).to_vec();
        let ng = self.wants(x.0);
        self.push(out, sh, Op::Gelu { x: x.0 }, ng)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let sh = self.shape(x).to_vec();
        let ng = self.wants(x.0);
        self.push(out, sh, Op::Sigmoid { x: x.0 }, ng)
    }

    // ── reductions ────────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.wants(x.0);
        self.push(vec![s], vec![1], Op::SumAll { x: x.0 }, ng)
    }

    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean_all: empty tensor");
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let ng = self.wants(x.0);
        self.push(vec![s], vec![1], Op::MeanAll { x: x.0 }, ng)
    }

    /// Treats the last axis as coordinate channels and returns the mean over
    /// all remaining positions of the Euclidean norm (or squared norm).
    /// Zero rows get a zero subgradient.
    pub fn euclid_mean_rows(&mut self, x: Tensor, squared: bool) -> Tensor {
        let sh = self.shape(x).to_vec();
        let c = *sh.last().expect("euclid_mean_rows: scalar input has no axis");
        let xd = &self.nodes[x.0].data;
        let rows = xd.len() / c;
        assert!(rows > 0, "euclid_mean_rows: empty tensor of shape {:?}", sh);
        let mut acc = 0.0;
        for row in xd.chunks(c) {
            let sq: f64 = row.iter().map(|&v| v * v).sum();
            acc += if squared { sq } else { sq.sqrt() };
        }
        let ng = self.wants(x.0);
        self.push(
            vec![acc / rows as f64],
            vec![1],
            Op::EuclidMeanRows { x: x.0, squared },
            ng,
        )
    }

    /// First difference along axis 0: `out[t] = x[t+1] - x[t]`.
    pub fn diff_axis0(&mut self, x: Tensor) -> Tensor {
        let sh = self.shape(x).to_vec();
        assert!(
            !sh.is_empty() && sh[0] >= 2,
            "diff_axis0: need at least 2 rows, got shape {:?}",
            sh
        );
        let row = numel(&sh[1..]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; (sh[0] - 1) * row];
        for t in 0..sh[0] - 1 {
            for j in 0..row {
                out[t * row + j] = xd[(t + 1) * row + j] - xd[t * row + j];
            }
        }
        let mut osh = sh;
        osh[0] -= 1;
        let ng = self.wants(x.0);
        self.push(out, osh, Op::DiffAxis0 { x: x.0 }, ng)
    }

    /// Perspective projection of `[..., 3]` camera-space millimeter points
    /// onto `[..., 2]` pixel coordinates. Depths at or below 1mm are
    /// degenerate and rejected.
    pub fn pinhole_project(&mut self, x: Tensor, fx: f64, fy: f64, cx: f64, cy: f64) -> Tensor {
        let sh = self.shape(x).to_vec();
        assert_eq!(
            sh.last(),
            Some(&3),
            "pinhole_project: expected [..., 3] input, got {:?}",
            sh
        );
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; xd.len() / 3 * 2];
        for (i, p) in xd.chunks(3).enumerate() {
            let (px, py, pz) = (p[0], p[1], p[2]);
            assert!(
                pz > 1.0,
                "pinhole_project: degenerate depth {pz}mm (must exceed 1mm)"
            );
            out[2 * i] = fx * px / pz + cx;
            out[2 * i + 1] = fy * py / pz + cy;
        }
        let mut osh = sh;
        *osh.last_mut().unwrap() = 2;
        let ng = self.wants(x.0);
        self.push(out, osh, Op::PinholeProject { x: x.0, fx, fy }, ng)
    }

    /// Inverted dropout; identity when `p == 0`. The mask is drawn once at
    /// the forward pass and reused by the backward pass.
    pub fn dropout(&mut self, x: Tensor, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout: rate {p} outside [0, 1)");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let sh = self.shape(x).to_vec();
        let ng = self.wants(x.0);
        self.push(out, sh, Op::Dropout { x: x.0, mask }, ng)
    }

    // ── composites ────────────────────────────────────────────────────────

    /// Affine map over the last axis: `y[..., o] = sum_i x[..., i] w[i, o] + b[o]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
        let y = self.linear_nb(x, w);
        let (wsh, bsh) = (self.shape(w).to_vec(), self.shape(b).to_vec());
        assert_eq!(
            bsh,
            vec![wsh[1]],
            "linear: bias shape {:?} does not match weight shape {:?}",
            bsh,
            wsh
        );
        self.add(y, b)
    }

    /// Linear map without bias (pair-bias projections and the like).
    pub fn linear_nb(&mut self, x: Tensor, w: Tensor) -> Tensor {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        assert_eq!(wsh.len(), 2, "linear: weight must be 2D, got {:?}", wsh);
        let c_in = *xsh.last().unwrap_or(&0);
        assert_eq!(
            c_in, wsh[0],
            "linear: input feature dim does not match weight (x {:?}, w {:?})",
            xsh, wsh
        );
        let rows = numel(&xsh) / c_in;
        let x2 = self.reshape(x, &[rows, c_in]);
        let y2 = self.matmul(x2, w, false, false);
        let mut osh = xsh;
        *osh.last_mut().unwrap() = wsh[1];
        self.reshape(y2, &osh)
    }

    // ── backward ──────────────────────────────────────────────────────────

    /// Reverse sweep seeding `d loss / d loss = 1`. The loss must be scalar.
    pub fn backward(&mut self, loss: Tensor) {
        let l = loss.0;
        assert_eq!(
            self.nodes[l].data.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[l].shape
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[l].needs_grad {
            // Loss does not depend on any differentiable leaf; all grads stay None.
            return;
        }
        self.nodes[l].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
    }

    fn grad_buf(&mut self, id: usize) -> Option<&mut [f64]> {
        let n = &mut self.nodes[id];
        if !n.needs_grad {
            return None;
        }
        if n.grad.is_none() {
            n.grad = Some(vec![0.0; n.data.len()]);
        }
        n.grad.as_deref_mut()
    }

    fn add_to_grad(&mut self, id: usize, contrib: &[f64]) {
        if let Some(buf) = self.grad_buf(id) {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
    }

    fn backprop_node(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.add_to_grad(a, g);
                if self.wants(b) {
                    let osh = self.nodes[i].shape.clone();
                    let bsh = self.nodes[b].shape.clone();
                    if osh == bsh {
                        self.add_to_grad(b, g);
                    } else if osh.len() >= bsh.len() && osh[osh.len() - bsh.len()..] == bsh[..] {
                        let bn = numel(&bsh);
                        let buf = self.grad_buf(b).expect("checked wants");
                        for (idx, &gv) in g.iter().enumerate() {
                            buf[idx % bn] += gv;
                        }
                    } else {
                        let strides = broadcast_strides(&osh, &bsh).expect("validated at forward");
                        let buf = self.grad_buf(b).expect("checked wants");
                        let mut coord = vec![0usize; osh.len()];
                        for &gv in g {
                            let mut bi = 0;
                            for d in 0..osh.len() {
                                bi += coord[d] * strides[d];
                            }
                            buf[bi] += gv;
                            for d in (0..osh.len()).rev() {
                                coord[d] += 1;
                                if coord[d] < osh[d] {
                                    break;
                                }
                                coord[d] = 0;
                            }
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                self.add_to_grad(a, g);
                if let Some(buf) = self.grad_buf(b) {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    let bd = self.nodes[b].data.clone();
                    let buf = self.grad_buf(a).expect("checked wants");
                    for ((x, &gv), &bv) in buf.iter_mut().zip(g).zip(&bd) {
                        *x += gv * bv;
                    }
                }
                if self.wants(b) {
                    let ad = self.nodes[a].data.clone();
                    let buf = self.grad_buf(b).expect("checked wants");
                    for ((x, &gv), &av) in buf.iter_mut().zip(g).zip(&ad) {
                        *x += gv * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(buf) = self.grad_buf(x) {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += c * gv;
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let ash = self.nodes[a].shape.clone();
                let bsh = self.nodes[b].shape.clone();
                let (m, k) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
                let n = if tb { bsh[0] } else { bsh[1] };
                if self.wants(a) {
                    let bd = self.nodes[b].data.clone();
                    let buf = self.grad_buf(a).expect("checked wants");
                    match (ta, tb) {
                        (false, false) => mm_nt(g, &bd, m, n, k, buf),
                        (false, true) => mm_nn(g, &bd, m, n, k, buf),
                        // C = A^T B with A [k, m]: dA = B dC^T
                        (true, false) => mm_nt(&bd, g, k, n, m, buf),
                        (true, true) => unreachable!(),
                    }
                }
                if self.wants(b) {
                    let ad = self.nodes[a].data.clone();
                    let buf = self.grad_buf(b).expect("checked wants");
                    match (ta, tb) {
                        (false, false) => mm_tn(&ad, g, m, k, n, buf),
                        (false, true) => mm_tn(g, &ad, m, n, k, buf),
                        (true, false) => mm_nn(&ad, g, k, m, n, buf),
                        (true, true) => unreachable!(),
                    }
                }
            }
            Op::Bmm { a, b, tb } => {
                let ash = self.nodes[a].shape.clone();
                let (bt, m, k) = (ash[0], ash[1], ash[2]);
                let n = if tb { self.nodes[b].shape[1] } else { self.nodes[b].shape[2] };
                if self.wants(a) {
                    let bd = self.nodes[b].data.clone();
                    let buf = self.grad_buf(a).expect("checked wants");
                    for t in 0..bt {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &bd[t * k * n..(t + 1) * k * n];
                        let os = &mut buf[t * m * k..(t + 1) * m * k];
                        if tb {
                            mm_nn(gs, bs, m, n, k, os);
                        } else {
                            mm_nt(gs, bs, m, n, k, os);
                        }
                    }
                }
                if self.wants(b) {
                    let ad = self.nodes[a].data.clone();
                    let buf = self.grad_buf(b).expect("checked wants");
                    for t in 0..bt {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &ad[t * m * k..(t + 1) * m * k];
                        if tb {
                            let os = &mut buf[t * n * k..(t + 1) * n * k];
                            mm_tn(gs, as_, m, n, k, os);
                        } else {
                            let os = &mut buf[t * k * n..(t + 1) * k * n];
                            mm_tn(as_, gs, m, k, n, os);
                        }
                    }
                }
            }
            Op::Permute { x, ref axes } => {
                if self.wants(x) {
                    let mut inv = vec![0usize; axes.len()];
                    for (d, &a) in axes.iter().enumerate() {
                        inv[a] = d;
                    }
                    let osh = self.nodes[i].shape.clone();
                    let (gview, _) = permute_copy(g, &osh, &inv);
                    self.add_to_grad(x, &gview);
                }
            }
            Op::Reshape { x } => self.add_to_grad(x, g),
            Op::SliceAxis0 { x, start } => {
                if self.wants(x) {
                    let row = numel(&self.nodes[i].shape[1..]);
                    let buf = self.grad_buf(x).expect("checked wants");
                    for (j, &gv) in g.iter().enumerate() {
                        buf[start * row + j] += gv;
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                if self.wants(x) {
                    let s = self.nodes[i].data.clone();
                    let c = *self.nodes[i].shape.last().unwrap();
                    let buf = self.grad_buf(x).expect("checked wants");
                    for (row, (srow, grow)) in s.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        let orow = &mut buf[row * c..(row + 1) * c];
                        for ((o, &sv), &gv) in orow.iter_mut().zip(srow).zip(grow) {
                            *o += sv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let c = *self.nodes[i].shape.last().unwrap();
                let xd = self.nodes[x].data.clone();
                let gd = self.nodes[gamma].data.clone();
                let rows = xd.len() / c;
                // Recompute per-row statistics rather than caching them.
                let mut xhat = vec![0.0; xd.len()];
                let mut inv_std = vec![0.0; rows];
                for (r, xrow) in xd.chunks(c).enumerate() {
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let var =
                        xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std[r] = inv;
                    for (j, &v) in xrow.iter().enumerate() {
                        xhat[r * c + j] = (v - mean) * inv;
                    }
                }
                if self.wants(beta) {
                    let buf = self.grad_buf(beta).expect("checked wants");
                    for grow in g.chunks(c) {
                        for (b, &gv) in buf.iter_mut().zip(grow) {
                            *b += gv;
                        }
                    }
                }
                if self.wants(gamma) {
                    let buf = self.grad_buf(gamma).expect("checked wants");
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((b, &gv), &xv) in buf.iter_mut().zip(grow).zip(xrow) {
                            *b += gv * xv;
                        }
                    }
                }
                if self.wants(x) {
                    let buf = self.grad_buf(x).expect("checked wants");
                    for r in 0..rows {
                        let grow = &g[r * c..(r + 1) * c];
                        let xrow = &xhat[r * c..(r + 1) * c];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xrow[j];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        let orow = &mut buf[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            orow[j] += inv_std[r] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.wants(x) {
                    let xd = self.nodes[x].data.clone();
                    let buf = self.grad_buf(x).expect("checked wants");
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(&xd) {
                        *b += gv * gelu_deriv(xv);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(x) {
                    let s = self.nodes[i].data.clone();
                    let buf = self.grad_buf(x).expect("checked wants");
                    for ((b, &gv), &sv) in buf.iter_mut().zip(g).zip(&s) {
                        *b += gv * sv * (1.0 - sv);
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(buf) = self.grad_buf(x) {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.wants(x) {
                    let n = self.nodes[x].data.len() as f64;
                    let buf = self.grad_buf(x).expect("checked wants");
                    for b in buf.iter_mut() {
                        *b += g[0] / n;
                    }
                }
            }
            Op::EuclidMeanRows { x, squared } => {
                if self.wants(x) {
                    let xd = self.nodes[x].data.clone();
                    let c = *self.nodes[x].shape.last().unwrap();
                    let rows = (xd.len() / c) as f64;
                    let buf = self.grad_buf(x).expect("checked wants");
                    for (r, xrow) in xd.chunks(c).enumerate() {
                        if squared {
                            for (j, &v) in xrow.iter().enumerate() {
                                buf[r * c + j] += g[0] * 2.0 * v / rows;
                            }
                        } else {
                            let norm = xrow.iter().map(|&v| v * v).sum::<f64>().sqrt();
                            if norm > 0.0 {
                                for (j, &v) in xrow.iter().enumerate() {
                                    buf[r * c + j] += g[0] * v / (norm * rows);
                                }
                            }
                        }
                    }
                }
            }
            Op::DiffAxis0 { x } => {
                if self.wants(x) {
                    let row = numel(&self.nodes[i].shape[1..]);
                    let t_out = self.nodes[i].shape[0];
                    let buf = self.grad_buf(x).expect("checked wants");
                    for t in 0..t_out {
                        for j in 0..row {
                            let gv = g[t * row + j];
                            buf[(t + 1) * row + j] += gv;
                            buf[t * row + j] -= gv;
                        }
                    }
                }
            }
            Op::PinholeProject { x, fx, fy, .. } => {
                if self.wants(x) {
                    let xd = self.nodes[x].data.clone();
                    let buf = self.grad_buf(x).expect("checked wants");
                    for (r, p) in xd.chunks(3).enumerate() {
                        let (px, py, pz) = (p[0], p[1], p[2]);
                        let (gu, gv) = (g[2 * r], g[2 * r + 1]);
                        buf[3 * r] += gu * fx / pz;
                        buf[3 * r + 1] += gv * fy / pz;
                        buf[3 * r + 2] += -gu * fx * px / (pz * pz) - gv * fy * py / (pz * pz);
                    }
                }
            }
            Op::Dropout { x, ref mask } => {
                if self.wants(x) {
                    let buf = self.grad_buf(x).expect("checked wants");
                    for ((b, &gv), &m) in buf.iter_mut().zip(g).zip(mask) {
                        *b += gv * m;
                    }
                }
            }
        }
    }
}
