//! Identity codes and the pose-conditioned code generator.
//!
//! Each joint position is encoded and projected by a shared `W_p` into a
//! pose token. The identity code issues a single query against those tokens
//! (unscaled dot-product softmax over joints); the attended value is added
//! back to the code.

use rand::Rng;

use crate::diffcore::{Graph, Tensor, TensorError, Var};
use crate::encoding::JOINT_BANDS;
use crate::params::{gaussian, Binder, Group, ParamStore};

pub const CODES: &str = "identity.codes";
pub const W_P: &str = "identity.w_p";
pub const W_Q: &str = "identity.w_q";
pub const W_K: &str = "identity.w_k";
pub const W_V: &str = "identity.w_v";

/// Width of an encoded joint.
pub const JOINT_FEATURES: usize = 6 * JOINT_BANDS;

/// Standard deviation of the initial identity codes.
pub const CODE_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityTable {
    pub identities: usize,
    pub dim: usize,
}

impl IdentityTable {
    pub fn new(identities: usize, dim: usize) -> Self {
        Self { identities, dim }
    }

    pub fn init(&self, store: &mut ParamStore, group: Group, rng: &mut impl Rng) {
        let d = self.dim;
        store.insert(CODES, gaussian(&[self.identities, d], CODE_INIT_STD, rng), group);
        store.insert(W_P, gaussian(&[JOINT_FEATURES, d], (1.0 / JOINT_FEATURES as f64).sqrt(), rng), group);
        let std = (1.0 / d as f64).sqrt();
        for name in [W_Q, W_K, W_V] {
            store.insert(name, gaussian(&[d, d], std, rng), group);
        }
    }

    /// Parameters outside the per-identity code rows.
    pub fn shared_param_count(&self) -> usize {
        JOINT_FEATURES * self.dim + 3 * self.dim * self.dim
    }
}

/// Row `i` of the code table as a `1 × D` node.
pub fn get_code(g: &mut Graph, binder: &mut Binder, store: &ParamStore, i: usize) -> Result<Var, TensorError> {
    let n = store.tensor(CODES)?.shape()[0];
    if i >= n {
        return Err(TensorError::IndexOutOfRange { index: i, len: n });
    }
    let codes = binder.var(g, store, CODES)?;
    g.gather_rows(codes, &[i])
}

/// `P = γ(J) · W_p` for root-centered joints `K × 3`; returns `K × D`.
pub fn pose_code(g: &mut Graph, binder: &mut Binder, store: &ParamStore, joints: Var) -> Result<Var, TensorError> {
    let enc = g.encode(joints, JOINT_BANDS)?;
    let w = binder.var(g, store, W_P)?;
    g.matmul(enc, w)
}

pub struct Attention {
    /// Pose-conditioned code `1 × D`.
    pub code: Var,
    /// Attention weights over joints, `1 × K`.
    pub weights: Var,
}

/// `F = softmax(S W_Q (P W_K)ᵀ) · P W_V + S`.
pub fn pose_conditioned_code(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    code: Var,
    pose: Var,
    scaled: bool,
) -> Result<Attention, TensorError> {
    let k = g.shape(pose)[0];
    if k == 0 {
        return Err(TensorError::Invalid("attention over zero joints".into()));
    }
    let (wq, wk, wv) = (binder.var(g, store, W_Q)?, binder.var(g, store, W_K)?, binder.var(g, store, W_V)?);
    let q = g.matmul(code, wq)?;
    let keys = g.matmul(pose, wk)?;
    let values = g.matmul(pose, wv)?;
    let kt = g.transpose(keys)?;
    let mut logits = g.matmul(q, kt)?;
    if scaled {
        let d = g.shape(code)[1] as f64;
        logits = g.scale(logits, 1.0 / d.sqrt())?;
    }
    let weights = g.softmax(logits, 1)?;
    let attended = g.matmul(weights, values)?;
    let code = g.add(attended, code)?;
    Ok(Attention { code, weights })
}

/// Attention without an identity code: the query is zero, so every joint
/// gets weight `1/K`.
pub fn codeless_pose_feature(g: &mut Graph, binder: &mut Binder, store: &ParamStore, pose: Var) -> Result<Var, TensorError> {
    let wv = binder.var(g, store, W_V)?;
    let values = g.matmul(pose, wv)?;
    g.reduce(values, crate::diffcore::Reduction::Mean, Some(0))
}

/// Root-centered joints of a frame as a constant `K × 3` node.
pub fn joints_constant(g: &mut Graph, joints: &[[f64; 3]]) -> Result<Var, TensorError> {
    let flat = joints.iter().flatten().copied().collect();
    Ok(g.constant(Tensor::new(&[joints.len(), 3], flat)?))
}
