//! Structural pair features from the kinematic tree.
//!
//! Every ordered joint pair (i, j) gets a d_p-dimensional feature built from
//! two facts the skeleton already knows: whether the pair is a bone
//! (symmetric binary joint map) and the signed index gap i - j (an embedding
//! table with one row per possible gap). The result is the J x J x d_p map
//! `P` that conditions attention between joints; it depends on parameters
//! but not on the input sequence.

use rand_chacha::ChaCha8Rng;

use crate::kinematics::Skeleton;
use crate::params::{normal, xavier, zeros, ParamRef, ParamSet};
use crate::tensor::{Tape, Tensor};

/// Symmetric binary adjacency of the kinematic tree, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMap {
    pub joints: usize,
    /// Row-major J x J entries in {0.0, 1.0}.
    pub m: Vec<f64>,
}

pub fn build_joint_map(skeleton: &Skeleton) -> JointMap {
    let j = skeleton.joint_count();
    let mut m = vec![0.0; j * j];
    for (child, &parent) in skeleton.parent.iter().enumerate().skip(1) {
        let p = parent as usize;
        m[child * j + p] = 1.0;
        m[p * j + child] = 1.0;
    }
    JointMap { joints: j, m }
}

/// Maps the signed gap i - j into a table row index 0..=2J-2.
pub fn gap_index(i: usize, j: usize, joints: usize) -> usize {
    assert!(
        i < joints && j < joints,
        "gap_index: pair ({i},{j}) out of range for {joints} joints"
    );
    (i as isize - j as isize + joints as isize - 1) as usize
}

/// Learnable weights of the structural feature map.
#[derive(Debug, Clone)]
pub struct SprParams {
    /// (2J-1) x d_p gap embedding table.
    pub gap_table: ParamRef,
    /// 1 x d_p expansion of the binary bone indicator.
    pub edge_w: ParamRef,
    /// d_p bias of the expansion.
    pub edge_b: ParamRef,
}

impl SprParams {
    pub fn init(ps: &mut ParamSet, joints: usize, d_p: usize, rng: &mut ChaCha8Rng) -> Self {
        let rows = 2 * joints - 1;
        Self {
            // Unit-ish embedding scale: joint pairs with no bone between
            // them start with the gap row as their entire feature, and the
            // pair-branch layer norms need those rows well away from zero.
            gap_table: ps.add("spr/gap_table", &[rows, d_p], normal(rng, rows * d_p, 0.5)),
            edge_w: ps.add("spr/edge_w", &[1, d_p], xavier(rng, 1, d_p)),
            edge_b: ps.add("spr/edge_b", &[d_p], zeros(d_p)),
        }
    }
}

/// P[i,j] = linear(M[i,j]) + gap_table[gap_index(i,j)], shape J x J x d_p.
///
/// The table lookup is phrased as a constant one-hot (J^2 x 2J-1) matrix
/// product so gradients reach the table through the ordinary matmul rule.
pub fn structural_features(
    tape: &mut Tape,
    ps: &ParamSet,
    map: &JointMap,
    params: &SprParams,
) -> Tensor {
    let j = map.joints;
    let rows = 2 * j - 1;
    let d_p = ps.shape(params.gap_table)[1];
    assert_eq!(
        ps.shape(params.gap_table)[0],
        rows,
        "structural_features: gap table has {} rows, tree needs {rows}",
        ps.shape(params.gap_table)[0]
    );

    let m_col = tape.constant(map.m.clone(), &[j * j, 1]);
    let w = tape.param(ps, params.edge_w);
    let b = tape.param(ps, params.edge_b);
    let edge_part = tape.matmul(m_col, w, false, false);
    let edge_part = tape.add(edge_part, b);

    let mut onehot = vec![0.0; j * j * rows];
    for i in 0..j {
        for k in 0..j {
            onehot[(i * j + k) * rows + gap_index(i, k, j)] = 1.0;
        }
    }
    let select = tape.constant(onehot, &[j * j, rows]);
    let table = tape.param(ps, params.gap_table);
    let gap_part = tape.matmul(select, table, false, false);

    let flat = tape.add(edge_part, gap_part);
    tape.reshape(flat, &[j, j, d_p])
}
