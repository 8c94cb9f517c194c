//! Run configuration: one TOML file with sections for the dataset, model,
//! rendering, training and ablations. Unknown keys are rejected.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::skeleton::SkinInit;

/// Independent generator for the stream `name` under a root seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root seed; every random stream is derived from it by name.
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: "runs/default".into(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            render: RenderConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub identities: usize,
    pub frames: usize,
    /// Bones per toy body, 2..=8.
    pub bones: usize,
    pub image_size: usize,
    /// Held-out cameras per identity, in addition to the training camera.
    pub novel_views: usize,
    pub focal: f64,
    pub camera_distance: f64,
    /// Quadrature samples per ray for ground-truth images.
    pub reference_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            identities: 2,
            frames: 30,
            bones: 6,
            image_size: 64,
            novel_views: 2,
            focal: 130.0,
            camera_distance: 4.0,
            reference_samples: 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub depth: usize,
    pub width: usize,
    /// Hidden layer whose input also receives the conditioning code.
    pub inject_layer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastGroup {
    /// Non-rigid MLP, identity codes and attention projections.
    Nonrigid,
    /// Canonical MLP, identity codes and attention projections.
    Canonical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub code_dim: usize,
    pub point_bands: usize,
    pub nonrigid: MlpConfig,
    pub canonical: MlpConfig,
    /// Initial bias of the raw density output.
    pub density_bias: f64,
    pub pose_corrector_hidden: usize,
    pub pose_corrector_depth: usize,
    pub per_identity_pose_corrector: bool,
    /// Divide attention logits by √D.
    pub attention_scaling: bool,
    pub skin_resolution: usize,
    /// Padding around the canonical bones for the skinning volume.
    pub skin_margin: f64,
    pub skin_init: SkinInit,
    /// Samples whose foreground mass is below this get zero density.
    pub cull_threshold: f64,
    /// Multiply density by the foreground mass.
    pub mass_weighted_density: bool,
    /// Coarse-to-fine band ramp on the non-rigid point encoding.
    pub anneal_nonrigid: bool,
    pub anneal_iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            code_dim: 256,
            point_bands: 10,
            nonrigid: MlpConfig {
                depth: 3,
                width: 48,
                inject_layer: 2,
            },
            canonical: MlpConfig {
                depth: 4,
                width: 64,
                inject_layer: 2,
            },
            density_bias: -1.0,
            pose_corrector_hidden: 32,
            pose_corrector_depth: 1,
            per_identity_pose_corrector: false,
            attention_scaling: false,
            skin_resolution: 32,
            skin_margin: 0.25,
            skin_init: SkinInit::BonePrior {
                background_logit: -2.0,
                width: 0.08,
                noise_std: 0.01,
            },
            cull_threshold: 1e-4,
            mass_weighted_density: true,
            anneal_nonrigid: false,
            anneal_iterations: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    /// Padding of the posed-skeleton box that bounds the rays.
    pub box_margin: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 48,
            background: [1.0, 1.0, 1.0],
            box_margin: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perceptual {
    Off,
    GradientL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Parameters are rounded to `f32` after every update.
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub patches_per_iter: usize,
    pub patch_size: usize,
    pub lr_fast: f64,
    pub lr_slow: f64,
    pub fast_group: FastGroup,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub lambda: f64,
    pub perceptual: Perceptual,
    pub perceptual_scales: usize,
    /// Patch centers are drawn from the mask bounding box grown by this.
    pub mask_dilation: usize,
    pub snapshot_every: usize,
    pub log_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            patches_per_iter: 2,
            patch_size: 16,
            lr_fast: 5e-4,
            lr_slow: 5e-5,
            fast_group: FastGroup::Canonical,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            lambda: 0.2,
            perceptual: Perceptual::GradientL1,
            perceptual_scales: 2,
            mask_dilation: 8,
            snapshot_every: 1000,
            log_every: 100,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the original large-scale setting.
    pub fn paper_scale() -> Self {
        Self {
            iterations: 400_000,
            patches_per_iter: 6,
            patch_size: 32,
            fast_group: FastGroup::Nonrigid,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub use_identity_codes: bool,
    pub use_pose_condition: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_identity_codes: true,
            use_pose_condition: true,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        let d = &self.dataset;
        if d.identities == 0 || d.frames == 0 || d.image_size < 16 {
            return bad("dataset needs identities ≥ 1, frames ≥ 1, image_size ≥ 16");
        }
        if !(2..=8).contains(&d.bones) {
            return bad("dataset.bones must be in 2..=8");
        }
        if d.reference_samples == 0 || d.focal <= 0.0 || d.camera_distance <= 0.0 {
            return bad("dataset focal, camera_distance and reference_samples must be positive");
        }
        let m = &self.model;
        if m.code_dim == 0 || m.point_bands == 0 || m.skin_resolution < 2 {
            return bad("model.code_dim, point_bands must be ≥ 1 and skin_resolution ≥ 2");
        }
        for (name, mlp) in [("nonrigid", m.nonrigid), ("canonical", m.canonical)] {
            if mlp.depth == 0 || mlp.width == 0 || mlp.inject_layer >= mlp.depth {
                return Err(ConfigError::Invalid(format!(
                    "model.{name}: depth and width must be positive and inject_layer < depth"
                )));
            }
        }
        if m.pose_corrector_hidden == 0 {
            return bad("model.pose_corrector_hidden must be positive");
        }
        if !(m.cull_threshold >= 0.0) {
            return bad("model.cull_threshold must be ≥ 0");
        }
        if self.render.samples_per_ray == 0 {
            return bad("render.samples_per_ray must be positive");
        }
        let t = &self.train;
        if t.iterations == 0 || t.patches_per_iter == 0 || t.patch_size == 0 {
            return bad("train counts must be positive");
        }
        if t.patch_size > d.image_size {
            return bad("train.patch_size exceeds the image size");
        }
        if !(t.lr_fast > 0.0 && t.lr_slow > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(t.lambda >= 0.0) {
            return bad("train.lambda must be ≥ 0");
        }
        if t.perceptual == Perceptual::GradientL1 && (t.perceptual_scales == 0 || t.patch_size >> (t.perceptual_scales - 1) < 2) {
            return bad("perceptual pyramid needs patches at least 2 pixels wide at the coarsest level");
        }
        if t.snapshot_every == 0 || t.log_every == 0 {
            return bad("train.snapshot_every and log_every must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_named() {
        let err = Config::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = Config::from_toml("seed = 3\n[dataset]\nidentities = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dataset.identities, 3);
        assert_eq!(cfg.dataset.frames, 30);
    }

    #[test]
    fn paper_scale_values() {
        let t = TrainConfig::paper_scale();
        assert_eq!((t.patches_per_iter, t.patch_size), (6, 32));
        assert_eq!(t.betas, [0.9, 0.999]);
        assert_eq!((t.lr_fast, t.lr_slow), (5e-4, 5e-5));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml("[dataset]\nbones = 9\n").is_err());
        assert!(Config::from_toml("[train]\nlr_fast = 0.0\n").is_err());
        assert!(Config::from_toml("[model.canonical]\ndepth = 2\nwidth = 8\ninject_layer = 2\n").is_err());
    }
}
