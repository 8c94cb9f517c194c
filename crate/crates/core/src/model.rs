//! The full learnable model: shared fields, identity table, pose corrector
//! and one skinning volume per identity.

use rand::Rng;

use crate::config::{Config, FastGroup};
use crate::fields::{CanonicalField, NonRigidField, CANONICAL, NONRIGID};
use crate::identity::IdentityTable;
use crate::params::{Group, ParamStore};
use crate::skeleton::{PoseCorrector, SkeletonTopology, SkinningField};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model needs at least one identity")]
    NoIdentities,
    #[error("identity {index} has {got} joints, expected {expected}")]
    JointMismatch { index: usize, got: usize, expected: usize },
    #[error("unknown identity {index}; valid range is 0..{count}")]
    UnknownIdentity { index: usize, count: usize },
    #[error(transparent)]
    Tensor(#[from] crate::diffcore::TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub topology: SkeletonTopology,
    pub skin: SkinningField,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub bodies: Vec<Body>,
    pub table: IdentityTable,
    pub correctors: Vec<PoseCorrector>,
    pub nonrigid: NonRigidField,
    pub canonical: CanonicalField,
    pub store: ParamStore,
}

pub fn skin_param(identity: usize) -> String {
    format!("skeleton.skin.{identity}")
}

/// Optimizer group of a parameter name under `fast`.
pub fn group_for(name: &str, fast: FastGroup) -> Group {
    let fast_prefix = match fast {
        FastGroup::Nonrigid => NONRIGID,
        FastGroup::Canonical => CANONICAL,
    };
    if name.starts_with("identity.") || name.starts_with(fast_prefix) {
        Group::Fast
    } else {
        Group::Slow
    }
}

impl Model {
    /// Architecture only; the parameter store is empty.
    pub fn skeleton_only(config: &Config, topologies: Vec<SkeletonTopology>) -> Result<Self, ModelError> {
        let n = topologies.len();
        if n == 0 {
            return Err(ModelError::NoIdentities);
        }
        let k = topologies[0].joints();
        for (index, t) in topologies.iter().enumerate() {
            if t.joints() != k {
                return Err(ModelError::JointMismatch {
                    index,
                    got: t.joints(),
                    expected: k,
                });
            }
        }
        let m = &config.model;
        let bodies = topologies
            .into_iter()
            .enumerate()
            .map(|(i, topology)| {
                let skin = SkinningField::new(skin_param(i), &topology, m.skin_resolution, m.skin_margin);
                Body { topology, skin }
            })
            .collect();
        let correctors = if m.per_identity_pose_corrector {
            (0..n)
                .map(|i| PoseCorrector::new(format!("skeleton.pose_correct.{i}"), k, m.pose_corrector_hidden, m.pose_corrector_depth))
                .collect()
        } else {
            vec![PoseCorrector::new("skeleton.pose_correct", k, m.pose_corrector_hidden, m.pose_corrector_depth)]
        };
        Ok(Self {
            config: config.clone(),
            bodies,
            table: IdentityTable::new(n, m.code_dim),
            correctors,
            nonrigid: NonRigidField::new(m.nonrigid, m.point_bands, k, m.code_dim)?,
            canonical: CanonicalField::new(m.canonical, m.point_bands, m.code_dim)?,
            store: ParamStore::new(),
        })
    }

    /// Builds and initializes every parameter.
    pub fn new(config: &Config, topologies: Vec<SkeletonTopology>, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let mut model = Self::skeleton_only(config, topologies)?;
        let fast = config.train.fast_group;
        let mut store = ParamStore::new();
        model.table.init(&mut store, Group::Fast, rng);
        for c in &model.correctors {
            c.init(&mut store, Group::Slow, rng);
        }
        model.nonrigid.init(&mut store, Group::Slow, rng);
        model.canonical.init(&mut store, Group::Slow, config.model.density_bias, rng);
        for body in &model.bodies {
            let logits = body.skin.init_logits(&body.topology, config.model.skin_init, rng);
            store.insert(body.skin.name.clone(), logits, Group::Slow);
        }
        for (name, p) in store.iter_mut() {
            p.group = group_for(name, fast);
        }
        model.store = store;
        Ok(model)
    }

    pub fn identities(&self) -> usize {
        self.bodies.len()
    }

    pub fn joints(&self) -> usize {
        self.bodies[0].topology.joints()
    }

    pub fn body(&self, identity: usize) -> Result<&Body, ModelError> {
        self.bodies.get(identity).ok_or(ModelError::UnknownIdentity {
            index: identity,
            count: self.bodies.len(),
        })
    }

    pub fn corrector(&self, identity: usize) -> &PoseCorrector {
        if self.correctors.len() == 1 {
            &self.correctors[0]
        } else {
            &self.correctors[identity]
        }
    }

    /// Parameters added by each identity: one code row and one skinning volume.
    pub fn per_identity_param_count(&self) -> usize {
        let mut n = self.table.dim + self.bodies[0].skin.param_count();
        if self.correctors.len() > 1 {
            n += self.correctors[0].param_count();
        }
        n
    }

    /// Parameters independent of the number of identities.
    pub fn shared_param_count(&self) -> usize {
        let correctors = if self.correctors.len() > 1 { 0 } else { self.correctors[0].param_count() };
        self.table.shared_param_count() + correctors + self.nonrigid.mlp.param_count() + self.canonical.mlp.param_count()
    }
}
