//! Finite-difference verification: every differentiable op in isolation and
//! the full rendering loss against a sampled parameter subset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{substream, Config, MlpConfig, Perceptual};
use crate::diffcore::{grad_check_with, relative_error, Activation, Graph, GridSpec, Reduction, Tensor, TensorError, Var};
use crate::identity::{CODES, W_K, W_P, W_Q, W_V};
use crate::losses::{total_loss, LossConfig};
use crate::model::Model;
use crate::renderer::{patch_pixels, render_rays, RenderError, Sampling};
use crate::skeleton::SkinInit;
use crate::synthdata::{make_cameras, make_identity, pose_sequence};

pub const OP_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: String,
    /// Graph op whose backward rule is exercised.
    pub op: &'static str,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < OP_TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("length matches")
}

/// `sum(y ⊙ W)` with fixed random `W`, so no gradient coordinate vanishes.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = g.constant(random(g.shape(y), seed ^ 0xABCD));
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (String, &'static str, Box<dyn Fn(&mut Graph, Var) -> Result<Var, TensorError>>, Tensor);

fn cases() -> Vec<Case> {
    let x = random(&[4, 3], 30);
    let other = random(&[4, 3], 31);
    let row = random(&[3], 32);
    let col = random(&[4, 1], 33);
    let away = x.map(|v| if v.abs() < 0.1 { v.signum() * 0.5 + v } else { v });
    let mut all: Vec<Case> = Vec::new();
    let mut push = |name: &str, op: &'static str, f: Box<dyn Fn(&mut Graph, Var) -> Result<Var, TensorError>>, x: &Tensor| {
        all.push((name.to_string(), op, f, x.clone()));
    };
    let o = other.clone();
    push("add", "add", Box::new(move |g, x| { let b = g.constant(o.clone()); let y = g.add(x, b)?; probe(g, y, 1) }), &x);
    let r = row.clone();
    push("sub (row broadcast)", "sub", Box::new(move |g, x| { let b = g.constant(r.clone()); let y = g.sub(b, x)?; probe(g, y, 2) }), &x);
    let k = col.clone();
    push("mul (column broadcast)", "mul", Box::new(move |g, x| { let b = g.constant(k.clone()); let y = g.mul(x, b)?; probe(g, y, 3) }), &x);
    let o = other.map(|v| v + 3.0);
    push("div (numerator)", "div", Box::new(move |g, x| { let b = g.constant(o.clone()); let y = g.div(x, b)?; probe(g, y, 4) }), &x);
    let o = other.clone();
    push("div (denominator)", "div", Box::new(move |g, x| { let b = g.constant(o.clone()); let y = g.div(b, x)?; probe(g, y, 5) }), &away);
    let xx = x.clone();
    push("mul (broadcast gradient)", "mul", Box::new(move |g, r| { let b = g.constant(xx.clone()); let y = g.mul(b, r)?; probe(g, y, 6) }), &row);
    push("affine", "affine", Box::new(|g, x| { let y = g.affine(x, -1.5, 0.25)?; probe(g, y, 7) }), &x);
    push("matmul (left)", "matmul", Box::new(|g, x| { let b = g.constant(random(&[3, 5], 8)); let y = g.matmul(x, b)?; probe(g, y, 9) }), &x);
    push("matmul (right)", "matmul", Box::new(|g, x| { let a = g.constant(random(&[2, 4], 10)); let y = g.matmul(a, x)?; probe(g, y, 11) }), &x);
    push("transpose", "transpose", Box::new(|g, x| { let y = g.transpose(x)?; probe(g, y, 12) }), &x);
    for (kind, op) in [
        (Activation::Relu, "relu"),
        (Activation::Sigmoid, "sigmoid"),
        (Activation::Softplus, "softplus"),
        (Activation::Sin, "sin"),
        (Activation::Cos, "cos"),
        (Activation::Exp, "exp"),
        (Activation::Abs, "abs"),
    ] {
        push(op, op, Box::new(move |g, x| { let y = g.activation(x, kind)?; probe(g, y, 13) }), &away);
    }
    push("softmax (axis 0)", "softmax", Box::new(|g, x| { let y = g.softmax(x, 0)?; probe(g, y, 14) }), &x);
    push("softmax (axis 1)", "softmax", Box::new(|g, x| { let y = g.softmax(x, 1)?; probe(g, y, 15) }), &x);
    push("concat", "concat", Box::new(|g, x| { let o = g.constant(random(&[4, 2], 16)); let y = g.concat(&[o, x, x], 1)?; probe(g, y, 17) }), &x);
    push("narrow", "narrow", Box::new(|g, x| { let y = g.narrow(x, 1, 1, 2)?; probe(g, y, 18) }), &x);
    push("reshape", "reshape", Box::new(|g, x| { let y = g.reshape(x, &[2, 6])?; probe(g, y, 19) }), &x);
    push("sum (axis)", "sum", Box::new(|g, x| { let y = g.sum_axis(x, 0)?; probe(g, y, 20) }), &x);
    push("mean", "mean", Box::new(|g, x| { let y = g.reduce(x, Reduction::Mean, Some(1))?; probe(g, y, 21) }), &x);
    push("max", "max", Box::new(|g, x| { let y = g.reduce(x, Reduction::Max, Some(1))?; probe(g, y, 22) }), &x);
    push("gather_rows", "gather_rows", Box::new(|g, x| { let y = g.gather_rows(x, &[3, 0, 3])?; probe(g, y, 23) }), &x);
    push("scatter_rows", "scatter_rows", Box::new(|g, x| { let y = g.scatter_rows(x, &[5, 1, 0, 2], 7)?; probe(g, y, 24) }), &x);
    push("encode", "encode", Box::new(|g, x| { let y = g.encode(x, 3)?; probe(g, y, 25) }), &x.map(|v| v * 0.25));
    push("rodrigues", "rodrigues", Box::new(|g, x| { let y = g.rodrigues(x)?; probe(g, y, 26) }), &x);
    push("rodrigues (small angle)", "rodrigues", Box::new(|g, x| { let y = g.rodrigues(x)?; probe(g, y, 27) }), &x.map(|v| v * 1e-3));

    let spec = GridSpec { res: 4, min: [-1.0; 3], max: [1.0; 3] };
    let grid = random(&[64, 2], 40);
    let pts = random(&[6, 3], 41).map(|v| v * 0.45);
    let p = pts.clone();
    push("grid_sample (grid)", "grid_sample", Box::new(move |g, gr| { let q = g.constant(p.clone()); let y = g.grid_sample(gr, q, spec, 1)?; probe(g, y, 42) }), &grid);
    let gr = grid.clone();
    push("grid_sample (points)", "grid_sample", Box::new(move |g, p| { let q = g.constant(gr.clone()); let y = g.grid_sample(q, p, spec, 0)?; probe(g, y, 43) }), &pts);
    let sigma = random(&[3, 5], 44).map(|v| v.abs() * 2.0);
    let rgb = random(&[15, 3], 45).map(|v| v.abs() * 0.5);
    let deltas: Vec<f64> = (0..15).map(|i| 0.1 + 0.01 * i as f64).collect();
    let (c, d) = (rgb.clone(), deltas.clone());
    push("composite (density)", "composite", Box::new(move |g, s| { let q = g.constant(c.clone()); let y = g.composite(s, q, &d)?; probe(g, y, 46) }), &sigma);
    let (s, d) = (sigma.clone(), deltas);
    push("composite (color)", "composite", Box::new(move |g, c| { let q = g.constant(s.clone()); let y = g.composite(q, c, &d)?; probe(g, y, 47) }), &rgb);
    all
}

/// Runs every op check; `fault` scales the backward rule of the named op.
pub fn op_suite(fault: Option<&str>) -> Result<Vec<OpCheck>, TensorError> {
    cases()
        .into_iter()
        .map(|(name, op, f, x)| {
            let report = grad_check_with(f, &x, OP_EPS, |g| {
                if let Some(op) = fault {
                    g.inject_backward_fault(op);
                }
            })?;
            Ok(OpCheck {
                name,
                op,
                max_rel_error: report.max_rel_error,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Small model used for the end-to-end check; ablation flags and encoding
/// switches follow `base`.
pub fn gradcheck_config(base: &Config) -> Config {
    let mut c = base.clone();
    c.dataset.bones = 3;
    c.dataset.image_size = 24;
    c.model.code_dim = 8;
    c.model.point_bands = 3;
    c.model.nonrigid = MlpConfig { depth: 2, width: 8, inject_layer: 1 };
    c.model.canonical = MlpConfig { depth: 2, width: 8, inject_layer: 1 };
    c.model.pose_corrector_hidden = 4;
    c.model.skin_resolution = 6;
    c.model.skin_init = SkinInit::BonePrior { background_logit: -2.0, width: 0.15, noise_std: 0.1 };
    c.model.density_bias = 1.0;
    c.render.samples_per_ray = 6;
    c.train.patch_size = 4;
    c.train.perceptual = Perceptual::GradientL1;
    c.train.perceptual_scales = 2;
    c
}

/// Coordinates checked per tensor.
const PER_TENSOR: usize = 3;

/// Compares the gradient of a patch loss with central differences on the
/// largest-gradient coordinates of every parameter tensor. Zero-initialized
/// output layers are perturbed first so every path carries gradient.
pub fn end_to_end(base: &Config, eps: f64) -> Result<Vec<ParamCheck>, RenderError> {
    let cfg = gradcheck_config(base);
    let ids = [make_identity(11, cfg.dataset.bones), make_identity(12, cfg.dataset.bones)];
    let mut rng = substream(cfg.seed, "gradcheck");
    let mut model = Model::new(&cfg, ids.iter().map(|i| i.topology.clone()).collect(), &mut rng)?;
    for (_, p) in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
    let identity = 1;
    let cams = make_cameras(cfg.dataset.image_size, 40.0, 4.0, 0);
    let pose = pose_sequence(&ids[identity], 4)[2].with_camera(&cams[0]);
    let size = cfg.train.patch_size;
    let (cu, cv) = pose.camera.project(pose.root());
    let pixels = patch_pixels(cu as usize - size / 2, cv as usize - size / 2, size);
    let target: Vec<f64> = (0..3 * pixels.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let loss_cfg = LossConfig::from(&cfg.train);

    let loss = |model: &Model, grads: bool| -> Result<(f64, Vec<(String, Tensor)>), RenderError> {
        let mut pass = render_rays::<ChaCha8Rng>(model, identity, &pose, &pixels, Sampling::Midpoint, 1.0)?;
        let g = &mut pass.graph;
        let gt = g.constant(Tensor::new(&[pixels.len(), 3], target.clone())?);
        let terms = total_loss(g, &[(pass.color, gt)], size, &loss_cfg)?;
        let value = g.value(terms.total).item();
        let mut out = Vec::new();
        if grads {
            g.backward(terms.total)?;
            for (name, _) in model.store.iter() {
                if let Some(v) = pass.binder.get(name) {
                    out.push((name.clone(), g.grad(v)));
                }
            }
        }
        Ok((value, out))
    };

    let (_, grads) = loss(&model, true)?;
    let mut checks = Vec::new();
    for (name, grad) in grads {
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
        for &index in order.iter().take(PER_TENSOR) {
            let analytic = grad.data()[index];
            let original = model.store.tensor(&name)?.data()[index];
            let mut shifted = |delta: f64| -> Result<f64, RenderError> {
                model.store.get_mut(&name).expect("bound parameter").value.data_mut()[index] = original + delta;
                Ok(loss(&model, false)?.0)
            };
            let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
            model.store.get_mut(&name).expect("bound parameter").value.data_mut()[index] = original;
            checks.push(ParamCheck {
                name: name.clone(),
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    Ok(checks)
}

/// Tensors an end-to-end check must cover.
pub const REQUIRED_TENSORS: [&str; 5] = [CODES, W_P, W_Q, W_K, W_V];
