//! Conditioned neural fields: the non-rigid offset MLP and the canonical
//! radiance MLP.
//!
//! Concatenating a per-batch constant (joint vector or code) to per-point
//! activations is realized as a split matmul: `[h, c] · W = h·W_h + c·W_c`,
//! with `c·W_c` computed once and broadcast over rows.

use rand::Rng;

use crate::config::MlpConfig;
use crate::diffcore::{Graph, Tensor, TensorError, Var};
use crate::encoding::{positional_encode_weighted, EncodingSpec};
use crate::params::{gaussian, Binder, Group, ParamStore};

pub const NONRIGID: &str = "fields.nonrigid";
pub const CANONICAL: &str = "fields.canonical";

/// How the output layer starts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputInit {
    Zero,
    /// Small Gaussian weights and the given biases.
    Small { std: f64 },
}

/// ReLU MLP with an optional side input at layer 0 and a code injected at
/// `inject_layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub input: usize,
    pub side: usize,
    pub code: usize,
    pub width: usize,
    pub depth: usize,
    pub inject_layer: usize,
    pub output: usize,
}

impl Mlp {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, group: Group, out: OutputInit, out_bias: &[f64], rng: &mut impl Rng) {
        for l in 0..self.depth {
            let fan_in = if l == 0 { self.input } else { self.width }
                + if l == 0 { self.side } else { 0 }
                + if l == self.inject_layer { self.code } else { 0 };
            let std = (2.0 / fan_in as f64).sqrt();
            let rows = if l == 0 { self.input } else { self.width };
            store.insert(self.name(&format!("l{l}.weight")), gaussian(&[rows, self.width], std, rng), group);
            if l == 0 && self.side > 0 {
                store.insert(self.name("l0.joints_weight"), gaussian(&[self.side, self.width], std, rng), group);
            }
            if l == self.inject_layer && self.code > 0 {
                let name = self.name(&format!("l{l}.code_weight"));
                store.insert(name, gaussian(&[self.code, self.width], std, rng), group);
            }
            store.insert(self.name(&format!("l{l}.bias")), Tensor::zeros(&[self.width]), group);
        }
        let w = match out {
            OutputInit::Zero => Tensor::zeros(&[self.width, self.output]),
            OutputInit::Small { std } => gaussian(&[self.width, self.output], std, rng),
        };
        store.insert(self.name("out.weight"), w, group);
        let bias = Tensor::new(&[self.output], out_bias.to_vec()).expect("bias length matches output");
        store.insert(self.name("out.bias"), bias, group);
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.input * self.width + self.side * self.width + self.code * self.width;
        n += (self.depth - 1) * self.width * self.width + self.depth * self.width;
        n + self.width * self.output + self.output
    }

    /// `x` is `B × input`; `side` is `1 × side`; `code` is `1 × code` or
    /// `None` to drop the injected term.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        x: Var,
        side: Option<Var>,
        code: Option<Var>,
    ) -> Result<Var, TensorError> {
        let mut h = x;
        for l in 0..self.depth {
            let w = binder.var(g, store, &self.name(&format!("l{l}.weight")))?;
            let b = binder.var(g, store, &self.name(&format!("l{l}.bias")))?;
            // constant row added to every point of this layer
            let mut row = b;
            if l == 0 && self.side > 0 {
                if let Some(s) = side {
                    let ws = binder.var(g, store, &self.name("l0.joints_weight"))?;
                    let t = g.matmul(s, ws)?;
                    row = g.add(t, row)?;
                }
            }
            if l == self.inject_layer && self.code > 0 {
                if let Some(c) = code {
                    let wc = binder.var(g, store, &self.name(&format!("l{l}.code_weight")))?;
                    let t = g.matmul(c, wc)?;
                    row = g.add(t, row)?;
                }
            }
            let z = g.matmul(h, w)?;
            let z = g.add(z, row)?;
            h = g.relu(z)?;
        }
        let w = binder.var(g, store, &self.name("out.weight"))?;
        let b = binder.var(g, store, &self.name("out.bias"))?;
        let z = g.matmul(h, w)?;
        g.add(z, b)
    }
}

/// Offset MLP: input `γ(x_c)`, root-relative joints as side input, the
/// pose-conditioned code injected mid-network; output `Δx_c`, zero at init.
#[derive(Clone, Debug, PartialEq)]
pub struct NonRigidField {
    pub mlp: Mlp,
    pub encoding: EncodingSpec,
}

impl NonRigidField {
    pub fn new(cfg: MlpConfig, bands: usize, joints: usize, code_dim: usize) -> Result<Self, TensorError> {
        let encoding = EncodingSpec::new(bands)?;
        Ok(Self {
            mlp: Mlp {
                prefix: NONRIGID.into(),
                input: encoding.width(3),
                side: 3 * joints,
                code: code_dim,
                width: cfg.width,
                depth: cfg.depth,
                inject_layer: cfg.inject_layer,
                output: 3,
            },
            encoding,
        })
    }

    pub fn init(&self, store: &mut ParamStore, group: Group, rng: &mut impl Rng) {
        self.mlp.init(store, group, OutputInit::Zero, &[0.0; 3], rng);
    }

    /// `Δx_c` for `B × 3` points; `joints_flat` is `1 × 3K`.
    #[allow(clippy::too_many_arguments)]
    pub fn offset(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        points: Var,
        joints_flat: Var,
        code: Option<Var>,
        band_weights: &[f64],
    ) -> Result<Var, TensorError> {
        let enc = positional_encode_weighted(g, points, self.encoding, band_weights)?;
        self.mlp.forward(g, binder, store, enc, Some(joints_flat), code)
    }
}

/// Radiance MLP: input `γ(x_c)`, identity code injected mid-network; output
/// sigmoid color and softplus density.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalField {
    pub mlp: Mlp,
    pub encoding: EncodingSpec,
}

pub struct Radiance {
    /// `B × 3` in `[0, 1]`.
    pub color: Var,
    /// `B × 1`, nonnegative.
    pub density: Var,
}

impl CanonicalField {
    pub fn new(cfg: MlpConfig, bands: usize, code_dim: usize) -> Result<Self, TensorError> {
        let encoding = EncodingSpec::new(bands)?;
        Ok(Self {
            mlp: Mlp {
                prefix: CANONICAL.into(),
                input: encoding.width(3),
                side: 0,
                code: code_dim,
                width: cfg.width,
                depth: cfg.depth,
                inject_layer: cfg.inject_layer,
                output: 4,
            },
            encoding,
        })
    }

    pub fn init(&self, store: &mut ParamStore, group: Group, density_bias: f64, rng: &mut impl Rng) {
        let std = (1.0 / self.mlp.width as f64).sqrt();
        self.mlp.init(store, group, OutputInit::Small { std }, &[0.0, 0.0, 0.0, density_bias], rng);
    }

    pub fn radiance(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        points: Var,
        code: Option<Var>,
    ) -> Result<Radiance, TensorError> {
        let enc = g.encode(points, self.encoding.bands)?;
        let out = self.mlp.forward(g, binder, store, enc, None, code)?;
        let parts = g.split(out, 1, &[3, 1])?;
        Ok(Radiance {
            color: g.sigmoid(parts[0])?,
            density: g.softplus(parts[1])?,
        })
    }
}
