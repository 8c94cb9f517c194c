//! Articulated skeleton: topology, poses, forward kinematics, pose
//! correction, per-identity skinning-weight volumes and inverse linear
//! blend skinning.
//!
//! Conventions. Joint `k` carries bone `k`. `rest_offsets[k]` is the
//! canonical offset of joint `k` from its parent (for the root, its
//! canonical position). The global rotation of bone `k` composes local
//! rotations from the root down: `A_k = A_parent · Rot(Ω_k)`. Bone `k` maps
//! canonical points to observation space with `x = A_k (x_c − rest_k) + J_k`;
//! the inverse used by skinning is `x_c = R_k x + t_k` with `R_k = A_kᵀ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{rodrigues_matrix, Graph, GridSpec, Tensor, TensorError, Var};
use crate::params::{gaussian, Binder, Group, ParamStore};
use crate::renderer::CameraModel;

pub type Vec3 = [f64; 3];
pub type Mat3 = [f64; 9];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SkeletonError {
    #[error("skeleton needs at least one joint")]
    Empty,
    #[error("joint 0 must be the root")]
    RootHasParent,
    #[error("joint {joint} has parent {parent}; parents must precede children")]
    BadParent { joint: usize, parent: usize },
    #[error("joint {0} has no parent but is not joint 0")]
    SecondRoot(usize),
    #[error("expected {expected} joints, got {got}")]
    JointCount { expected: usize, got: usize },
}

/// Tree of joints in the canonical T-pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub parents: Vec<Option<usize>>,
    pub rest_offsets: Vec<Vec3>,
    /// Segment of bone `k` from its joint, in the bone's canonical frame.
    pub bone_tips: Vec<Vec3>,
}

impl SkeletonTopology {
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vec3>,
        bone_tips: Vec<Vec3>,
    ) -> Result<Self, SkeletonError> {
        let t = Self {
            parents,
            rest_offsets,
            bone_tips,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        let k = self.parents.len();
        if k == 0 {
            return Err(SkeletonError::Empty);
        }
        for len in [self.rest_offsets.len(), self.bone_tips.len()] {
            if len != k {
                return Err(SkeletonError::JointCount { expected: k, got: len });
            }
        }
        if self.parents[0].is_some() {
            return Err(SkeletonError::RootHasParent);
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match *p {
                None => return Err(SkeletonError::SecondRoot(j)),
                Some(p) if p >= j => return Err(SkeletonError::BadParent { joint: j, parent: p }),
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    /// Canonical joint positions.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        let mut out: Vec<Vec3> = Vec::with_capacity(self.joints());
        for (k, off) in self.rest_offsets.iter().enumerate() {
            let base = match self.parents[k] {
                Some(p) => out[p],
                None => [0.0; 3],
            };
            out.push(add(base, *off));
        }
        out
    }

    /// Canonical bone segments `(start, end)`.
    pub fn rest_segments(&self) -> Vec<(Vec3, Vec3)> {
        self.rest_positions()
            .into_iter()
            .zip(&self.bone_tips)
            .map(|(j, tip)| (j, add(j, *tip)))
            .collect()
    }

    /// Root-at-rest pose with all orientations zero.
    pub fn rest_pose(&self, camera: CameraModel) -> PoseFrame {
        PoseFrame {
            joints: self.rest_positions(),
            orientations: vec![[0.0; 3]; self.joints()],
            camera,
        }
    }
}

/// Joint positions `J` and axis-angle orientations `Ω` of one frame, plus the
/// camera viewing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub joints: Vec<Vec3>,
    pub orientations: Vec<Vec3>,
    pub camera: CameraModel,
}

impl PoseFrame {
    pub fn root(&self) -> Vec3 {
        self.joints[0]
    }

    /// Joint positions relative to the root joint.
    pub fn root_relative(&self) -> Vec<Vec3> {
        let r = self.root();
        self.joints.iter().map(|j| sub(*j, r)).collect()
    }

    /// Drives `topology` with this frame's root position and orientations,
    /// recomputing joint positions for that skeleton.
    pub fn retarget(&self, topology: &SkeletonTopology, camera: CameraModel) -> PoseFrame {
        let kin = Kinematics::from_orientations(topology, self.root(), &self.orientations);
        PoseFrame {
            joints: kin.joints,
            orientations: self.orientations.clone(),
            camera,
        }
    }
}

/// Global bone rotations and joint positions of a posed skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct Kinematics {
    pub rotations: Vec<Mat3>,
    pub joints: Vec<Vec3>,
}

impl Kinematics {
    pub fn from_orientations(topology: &SkeletonTopology, root: Vec3, orientations: &[Vec3]) -> Self {
        let local: Vec<Mat3> = orientations.iter().map(|w| rodrigues_matrix(*w)).collect();
        Self::from_local(topology, root, &local)
    }

    pub fn from_local(topology: &SkeletonTopology, root: Vec3, local: &[Mat3]) -> Self {
        let k = topology.joints();
        let mut rotations: Vec<Mat3> = Vec::with_capacity(k);
        let mut joints: Vec<Vec3> = Vec::with_capacity(k);
        for j in 0..k {
            match topology.parents[j] {
                None => {
                    rotations.push(local[j]);
                    joints.push(root);
                }
                Some(p) => {
                    rotations.push(mat_mul(&rotations[p], &local[j]));
                    joints.push(add(joints[p], mat_vec(&rotations[p], topology.rest_offsets[j])));
                }
            }
        }
        Self { rotations, joints }
    }

    /// Posed bone segments.
    pub fn segments(&self, topology: &SkeletonTopology) -> Vec<(Vec3, Vec3)> {
        self.joints
            .iter()
            .zip(&self.rotations)
            .zip(&topology.bone_tips)
            .map(|((j, r), tip)| (*j, add(*j, mat_vec(r, *tip))))
            .collect()
    }

    /// Inverse bone transforms (observation → canonical).
    pub fn bone_transforms(&self, topology: &SkeletonTopology) -> BoneTransforms {
        let rest = topology.rest_positions();
        let rotations: Vec<Mat3> = self.rotations.iter().map(transpose).collect();
        let translations = rotations
            .iter()
            .zip(&self.joints)
            .zip(&rest)
            .map(|((r, j), c)| sub(*c, mat_vec(r, *j)))
            .collect();
        BoneTransforms {
            rotations,
            translations,
        }
    }
}

/// Per-bone `(R_k, t_k)` with `x_c = R_k x + t_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneTransforms {
    pub rotations: Vec<Mat3>,
    pub translations: Vec<Vec3>,
}

impl BoneTransforms {
    pub fn apply(&self, k: usize, x: Vec3) -> Vec3 {
        add(mat_vec(&self.rotations[k], x), self.translations[k])
    }
}

pub fn forward_kinematics(topology: &SkeletonTopology, pose: &PoseFrame) -> BoneTransforms {
    Kinematics::from_orientations(topology, pose.root(), &pose.orientations).bone_transforms(topology)
}

// ── graph-side kinematics ───────────────────────────────────────────────

/// Bone transforms as graph values, in row-vector form: a batch `X` (`B × 3`)
/// maps to canonical bone-`k` coordinates as `X · A_k + t_k`.
pub struct GraphKinematics {
    /// Global rotation `A_k` (`3 × 3`); equals `R_kᵀ`.
    pub rotations: Vec<Var>,
    /// `t_k` as a `1 × 3` row.
    pub translations: Vec<Var>,
    /// Posed joint positions, `1 × 3` rows.
    pub joints: Vec<Var>,
}

impl GraphKinematics {
    pub fn build(
        g: &mut Graph,
        topology: &SkeletonTopology,
        root: Vec3,
        local: &[Var],
    ) -> Result<Self, TensorError> {
        let rest = topology.rest_positions();
        let k = topology.joints();
        let mut rotations: Vec<Var> = Vec::with_capacity(k);
        let mut joints: Vec<Var> = Vec::with_capacity(k);
        for j in 0..k {
            match topology.parents[j] {
                None => {
                    rotations.push(local[j]);
                    joints.push(g.constant(Tensor::new(&[1, 3], root.to_vec())?));
                }
                Some(p) => {
                    let a = g.matmul(rotations[p], local[j])?;
                    rotations.push(a);
                    // J_j = J_p + o_jᵀ · A_pᵀ
                    let off = g.constant(Tensor::new(&[1, 3], topology.rest_offsets[j].to_vec())?);
                    let at = g.transpose(rotations[p])?;
                    let moved = g.matmul(off, at)?;
                    joints.push(g.add(joints[p], moved)?);
                }
            }
        }
        let mut translations = Vec::with_capacity(k);
        for j in 0..k {
            // t_j = rest_j − J_j · A_j
            let rest_j = g.constant(Tensor::new(&[1, 3], rest[j].to_vec())?);
            let ja = g.matmul(joints[j], rotations[j])?;
            translations.push(g.sub(rest_j, ja)?);
        }
        Ok(Self {
            rotations,
            translations,
            joints,
        })
    }

    /// Canonical coordinates of `points` under bone `k`.
    pub fn to_canonical(&self, g: &mut Graph, points: Var, k: usize) -> Result<Var, TensorError> {
        let rotated = g.matmul(points, self.rotations[k])?;
        g.add(rotated, self.translations[k])
    }

    /// Current numeric values.
    pub fn numeric(&self, g: &Graph) -> BoneTransforms {
        let mut rotations = Vec::new();
        let mut translations = Vec::new();
        for (a, t) in self.rotations.iter().zip(&self.translations) {
            let a: Mat3 = g.value(*a).data().try_into().expect("3x3");
            rotations.push(transpose(&a));
            translations.push(g.value(*t).data().try_into().expect("1x3"));
        }
        BoneTransforms {
            rotations,
            translations,
        }
    }

    /// Root-relative posed joints as a `K × 3` matrix.
    pub fn root_relative_joints(&self, g: &mut Graph) -> Result<Var, TensorError> {
        let mut rows = Vec::with_capacity(self.joints.len());
        for &j in &self.joints {
            rows.push(g.sub(j, self.joints[0])?);
        }
        g.concat(&rows, 0)
    }
}

/// Splits a `K × 3 × 3` rotation stack into `K` separate `3 × 3` nodes.
pub fn unstack_rotations(g: &mut Graph, stack: Var) -> Result<Vec<Var>, TensorError> {
    let k = g.shape(stack)[0];
    (0..k)
        .map(|j| {
            let one = g.narrow(stack, 0, j, 1)?;
            g.reshape(one, &[3, 3])
        })
        .collect()
}

// ── pose correction ─────────────────────────────────────────────────────

/// MLP predicting axis-angle offsets from the flattened orientations; the
/// output layer starts at zero so the correction is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseCorrector {
    pub prefix: String,
    pub joints: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl PoseCorrector {
    pub fn new(prefix: impl Into<String>, joints: usize, hidden: usize, depth: usize) -> Self {
        Self {
            prefix: prefix.into(),
            joints,
            hidden,
            depth,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, group: Group, rng: &mut impl Rng) {
        let mut fan_in = 3 * self.joints;
        for l in 0..self.depth {
            let std = (2.0 / fan_in as f64).sqrt();
            store.insert(self.name(&format!("l{l}.weight")), gaussian(&[fan_in, self.hidden], std, rng), group);
            store.insert(self.name(&format!("l{l}.bias")), Tensor::zeros(&[self.hidden]), group);
            fan_in = self.hidden;
        }
        store.insert(self.name("out.weight"), Tensor::zeros(&[fan_in, 3 * self.joints]), group);
        store.insert(self.name("out.bias"), Tensor::zeros(&[3 * self.joints]), group);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut fan_in = 3 * self.joints;
        for _ in 0..self.depth {
            n += fan_in * self.hidden + self.hidden;
            fan_in = self.hidden;
        }
        n + fan_in * 3 * self.joints + 3 * self.joints
    }

    /// Offsets `ΔΩ` as a `K × 3` node.
    pub fn offsets(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        orientations: &[Vec3],
    ) -> Result<Var, TensorError> {
        let flat: Vec<f64> = orientations.iter().flatten().copied().collect();
        let mut h = g.constant(Tensor::new(&[1, flat.len()], flat)?);
        for l in 0..self.depth {
            let w = binder.var(g, store, &self.name(&format!("l{l}.weight")))?;
            let b = binder.var(g, store, &self.name(&format!("l{l}.bias")))?;
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            h = g.relu(z)?;
        }
        let w = binder.var(g, store, &self.name("out.weight"))?;
        let b = binder.var(g, store, &self.name("out.bias"))?;
        let z = g.matmul(h, w)?;
        let z = g.add(z, b)?;
        g.reshape(z, &[self.joints, 3])
    }
}

/// Corrected local rotations `Rot(Ω_k) · Rot(ΔΩ_k)`, one `3 × 3` node per joint.
pub fn pose_correct(
    g: &mut Graph,
    orientations: &[Vec3],
    offsets: Option<Var>,
) -> Result<Vec<Var>, TensorError> {
    let flat: Vec<f64> = orientations.iter().flatten().copied().collect();
    let omega = g.constant(Tensor::new(&[orientations.len(), 3], flat)?);
    let base = g.rodrigues(omega)?;
    let base = unstack_rotations(g, base)?;
    let Some(offsets) = offsets else {
        return Ok(base);
    };
    let delta = g.rodrigues(offsets)?;
    let delta = unstack_rotations(g, delta)?;
    base.into_iter()
        .zip(delta)
        .map(|(b, d)| g.matmul(b, d))
        .collect()
}

// ── skinning weights ────────────────────────────────────────────────────

/// How a skinning volume is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkinInit {
    /// Background logit constant, bone logits `N(0, noise_std)`.
    Noise { background_logit: f64, noise_std: f64 },
    /// Bone logits are log-Gaussians of the distance to the canonical bone
    /// segment; background logit constant.
    BonePrior { background_logit: f64, width: f64, noise_std: f64 },
}

/// Per-identity canonical skinning-weight volume: `G³ × (K+1)` logits, the
/// last channel being background.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningField {
    pub name: String,
    pub grid: GridSpec,
    pub bones: usize,
}

/// Floor of the log-Gaussian bone prior.
const PRIOR_LOGIT_FLOOR: f64 = -30.0;

impl SkinningField {
    pub fn new(name: impl Into<String>, topology: &SkeletonTopology, res: usize, margin: f64) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for (a, b) in topology.rest_segments() {
            for p in [a, b] {
                for d in 0..3 {
                    min[d] = min[d].min(p[d] - margin);
                    max[d] = max[d].max(p[d] + margin);
                }
            }
        }
        Self {
            name: name.into(),
            grid: GridSpec { res, min, max },
            bones: topology.joints(),
        }
    }

    pub fn channels(&self) -> usize {
        self.bones + 1
    }

    pub fn param_count(&self) -> usize {
        self.grid.vertices() * self.channels()
    }

    pub fn init_logits(&self, topology: &SkeletonTopology, init: SkinInit, rng: &mut impl Rng) -> Tensor {
        let c = self.channels();
        let v = self.grid.vertices();
        let (background, noise_std) = match init {
            SkinInit::Noise { background_logit, noise_std } => (background_logit, noise_std),
            SkinInit::BonePrior { background_logit, noise_std, .. } => (background_logit, noise_std),
        };
        let mut logits = gaussian(&[v, c], noise_std, rng);
        let segments = topology.rest_segments();
        let res = self.grid.res;
        for ix in 0..res {
            for iy in 0..res {
                for iz in 0..res {
                    let vert = (ix * res + iy) * res + iz;
                    let p = self.grid.vertex_position(ix, iy, iz);
                    let row = &mut logits.data_mut()[vert * c..(vert + 1) * c];
                    if let SkinInit::BonePrior { width, .. } = init {
                        for (k, (a, b)) in segments.iter().enumerate() {
                            let d = segment_distance(p, *a, *b);
                            row[k] += (-d * d / (2.0 * width * width)).max(PRIOR_LOGIT_FLOOR);
                        }
                    }
                    row[c - 1] = background;
                }
            }
        }
        logits
    }
}

/// Observation-space skinning result for a batch.
pub struct ObservationWeights {
    /// Normalized weights `w^o`, `B × K`; zero rows where the mass is zero.
    pub weights: Var,
    /// Unnormalized foreground mass `Σ_k w^c_k`, `B × 1`.
    pub mass: Var,
    /// Canonical candidates `R_k x + t_k`, one `B × 3` node per bone.
    pub candidates: Vec<Var>,
}

/// Samples each bone's canonical weight at its own canonical candidate point
/// and normalizes over bones.
pub fn observation_weights(
    g: &mut Graph,
    points: Var,
    kin: &GraphKinematics,
    field: &SkinningField,
    softmaxed: Var,
) -> Result<ObservationWeights, TensorError> {
    let mut candidates = Vec::with_capacity(field.bones);
    let mut columns = Vec::with_capacity(field.bones);
    for k in 0..field.bones {
        let p = kin.to_canonical(g, points, k)?;
        columns.push(g.grid_sample(softmaxed, p, field.grid, k)?);
        candidates.push(p);
    }
    let wc = g.concat(&columns, 1)?;
    let mass = g.sum_axis(wc, 1)?;
    // Rows with zero mass divide by one instead, leaving zero weights.
    let guard: Vec<f64> = g
        .value(mass)
        .data()
        .iter()
        .map(|&m| if m == 0.0 { 1.0 } else { 0.0 })
        .collect();
    let guard = g.constant(Tensor::new(&[guard.len(), 1], guard)?);
    let denom = g.add(mass, guard)?;
    let weights = g.div(wc, denom)?;
    Ok(ObservationWeights {
        weights,
        mass,
        candidates,
    })
}

/// `x_c = Σ_k w^o_k (R_k x + t_k)`.
pub fn inverse_lbs(g: &mut Graph, candidates: &[Var], weights: Var) -> Result<Var, TensorError> {
    let mut acc: Option<Var> = None;
    for (k, &p) in candidates.iter().enumerate() {
        let w = g.narrow(weights, 1, k, 1)?;
        let term = g.mul(p, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| TensorError::Invalid("inverse_lbs with no bones".into()))
}

/// Foreground mass of each point without recording a tape.
pub fn foreground_mass(
    points: &[Vec3],
    transforms: &BoneTransforms,
    field: &SkinningField,
    softmaxed: &Tensor,
) -> Vec<f64> {
    let c = softmaxed.shape()[1];
    let data = softmaxed.data();
    points
        .iter()
        .map(|&x| {
            (0..field.bones)
                .map(|k| {
                    let p = transforms.apply(k, x);
                    field.grid.stencil(p).map_or(0.0, |st| {
                        st.iter().map(|&(idx, w, _)| w * data[idx * c + k]).sum::<f64>()
                    })
                })
                .sum()
        })
        .collect()
}

// ── small vector helpers ────────────────────────────────────────────────

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = a[3 * r] * b[c] + a[3 * r + 1] * b[3 + c] + a[3 * r + 2] * b[6 + c];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]]
}

pub fn det(m: &Mat3) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Distance from `p` to the segment `[a, b]`.
pub fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm(sub(p, add(a, scale(ab, t))))
}
