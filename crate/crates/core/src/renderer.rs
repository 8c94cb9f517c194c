//! Cameras, rays, depth sampling, compositing and the per-pixel rendering
//! pipeline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{composite_ray, Graph, Tensor, TensorError, Var};
use crate::encoding::annealing_weights;
use crate::fields::Radiance;
use crate::identity::{codeless_pose_feature, get_code, pose_code, pose_conditioned_code};
use crate::model::{Model, ModelError};
use crate::params::Binder;
use crate::skeleton::{
    add, foreground_mass, inverse_lbs, mat_vec, norm, observation_weights, pose_correct, scale, sub,
    transpose, GraphKinematics, Kinematics, Mat3, PoseFrame, SkeletonTopology, Vec3,
};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("pixel ({u}, {v}) outside a {width}×{height} image")]
    PixelOutOfBounds { u: usize, v: usize, width: usize, height: usize },
}

/// Pinhole camera; `rotation`/`translation` map world to camera coordinates
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 110.0, 64, 64)
    }
}

impl CameraModel {
    /// Camera at `eye` looking at `target`, principal point at the image
    /// center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let f = normalize(sub(target, eye));
        let right = normalize(cross(f, up));
        let down = cross(f, right);
        let rotation = [right[0], right[1], right[2], down[0], down[1], down[2], f[0], f[1], f[2]];
        let translation = scale(mat_vec(&rotation, eye), -1.0);
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        let rt = crate::skeleton::mat_mul(&transpose(&self.rotation), &self.rotation);
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                if (rt[3 * r + c] - want).abs() > 1e-9 {
                    return Err("extrinsic rotation is not orthonormal".into());
                }
            }
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        scale(mat_vec(&transpose(&self.rotation), self.translation), -1.0)
    }

    /// Continuous pixel coordinates of a world point (pixel `(i, j)` covers
    /// `[i, i+1) × [j, j+1)`).
    pub fn project(&self, x: Vec3) -> (f64, f64) {
        let p = add(mat_vec(&self.rotation, x), self.translation);
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    /// Unit world direction through continuous pixel coordinates `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        normalize(mat_vec(&transpose(&self.rotation), d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

/// Axis-aligned box bounding the scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl SceneBox {
    /// Box around posed bone segments, padded by `margin`.
    pub fn around(segments: &[(Vec3, Vec3)], margin: f64) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for (a, b) in segments {
            for p in [a, b] {
                for d in 0..3 {
                    min[d] = min[d].min(p[d] - margin);
                    max[d] = max[d].max(p[d] + margin);
                }
            }
        }
        Self { min, max }
    }

    /// Scene box of `topology` driven by `pose`.
    pub fn posed(topology: &SkeletonTopology, pose: &PoseFrame, margin: f64) -> Self {
        let kin = Kinematics::from_orientations(topology, pose.root(), &pose.orientations);
        Self::around(&kin.segments(topology), margin)
    }

    /// Entry and exit depths of a ray, clipped to positive depths.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for d in 0..3 {
            if dir[d].abs() < 1e-15 {
                if origin[d] < self.min[d] || origin[d] > self.max[d] {
                    return None;
                }
                continue;
            }
            let a = (self.min[d] - origin[d]) / dir[d];
            let b = (self.max[d] - origin[d]) / dir[d];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Rays through the centers of `pixels` (`(column, row)`); `None` marks rays
/// that miss the scene box.
pub fn generate_rays(camera: &CameraModel, pixels: &[(usize, usize)], scene: &SceneBox) -> Result<Vec<Option<Ray>>, RenderError> {
    let origin = camera.center();
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= camera.width || v >= camera.height {
                return Err(RenderError::PixelOutOfBounds {
                    u,
                    v,
                    width: camera.width,
                    height: camera.height,
                });
            }
            let direction = camera.direction(u as f64 + 0.5, v as f64 + 0.5);
            Ok(scene.intersect(origin, direction).map(|(near, far)| Ray {
                origin,
                direction,
                near,
                far,
            }))
        })
        .collect()
}

/// One uniform depth in each of `m` equal bins of `[near, far]`.
pub fn stratified_sample(ray: &Ray, m: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bin = (ray.far - ray.near) / m as f64;
    (0..m).map(|i| ray.near + (i as f64 + rng.random::<f64>()) * bin).collect()
}

/// Bin midpoints; used for evaluation and the oracle.
pub fn midpoint_sample(ray: &Ray, m: usize) -> Vec<f64> {
    let bin = (ray.far - ray.near) / m as f64;
    (0..m).map(|i| ray.near + (i as f64 + 0.5) * bin).collect()
}

/// Spacing to the next depth; the last interval is `(far − near)/M`.
pub fn deltas(ray: &Ray, depths: &[f64]) -> Vec<f64> {
    let cap = (ray.far - ray.near) / depths.len() as f64;
    let mut out: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    out.push(cap);
    out
}

/// Per-ray samples ready for compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub depths: Vec<Vec<f64>>,
    pub colors: Vec<Vec<[f64; 3]>>,
    pub densities: Vec<Vec<f64>>,
    pub deltas: Vec<Vec<f64>>,
}

/// Accumulated color and opacity of every ray of `samples`.
pub fn composite(samples: &SampleBatch) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut colors = Vec::with_capacity(samples.densities.len());
    let mut alphas = Vec::with_capacity(samples.densities.len());
    for r in 0..samples.densities.len() {
        let rgb: Vec<f64> = samples.colors[r].iter().flatten().copied().collect();
        let out = composite_ray(&samples.densities[r], &rgb, &samples.deltas[r]);
        colors.push([out[0], out[1], out[2]]);
        alphas.push(out[3]);
    }
    (colors, alphas)
}

/// How depths are placed along rays.
pub enum Sampling<'a, R: Rng> {
    Stratified(&'a mut R),
    Midpoint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderStats {
    pub rays: usize,
    pub empty_rays: usize,
    pub samples: usize,
    pub evaluated: usize,
}

/// A rendered ray batch together with the tape that produced it.
pub struct RenderPass {
    pub graph: Graph,
    pub binder: Binder,
    /// `R × 3` color over the background.
    pub color: Var,
    /// `R × 1` opacity.
    pub alpha: Var,
    pub stats: RenderStats,
}

impl RenderPass {
    pub fn color_values(&self) -> &[f64] {
        self.graph.value(self.color).data()
    }

    pub fn alpha_values(&self) -> &[f64] {
        self.graph.value(self.alpha).data()
    }
}

/// Renders `pixels` of `pose.camera` for `identity`. `progress` in `[0, 1]`
/// drives the optional encoding ramp.
pub fn render_rays<R: Rng>(
    model: &Model,
    identity: usize,
    pose: &PoseFrame,
    pixels: &[(usize, usize)],
    sampling: Sampling<'_, R>,
    progress: f64,
) -> Result<RenderPass, RenderError> {
    let cfg = &model.config;
    let body = model.body(identity)?;
    let m = cfg.render.samples_per_ray;
    let scene = SceneBox::posed(&body.topology, pose, cfg.render.box_margin);
    let rays = generate_rays(&pose.camera, pixels, &scene)?;

    let mut sampling = sampling;
    let mut hit = Vec::new();
    let mut points: Vec<Vec3> = Vec::new();
    let mut spacing: Vec<f64> = Vec::new();
    for (r, ray) in rays.iter().enumerate() {
        let Some(ray) = ray else { continue };
        let depths = match &mut sampling {
            Sampling::Stratified(rng) => stratified_sample(ray, m, *rng),
            Sampling::Midpoint => midpoint_sample(ray, m),
        };
        spacing.extend(deltas(ray, &depths));
        points.extend(depths.iter().map(|&t| ray.at(t)));
        hit.push(r);
    }

    let mut g = Graph::new();
    g.set_debug(false);
    let mut binder = Binder::new();
    let store = &model.store;
    let mut stats = RenderStats {
        rays: pixels.len(),
        empty_rays: pixels.len() - hit.len(),
        samples: points.len(),
        evaluated: 0,
    };

    let offsets = model.corrector(identity).offsets(&mut g, &mut binder, store, &pose.orientations)?;
    let local = pose_correct(&mut g, &pose.orientations, Some(offsets))?;
    let kin = GraphKinematics::build(&mut g, &body.topology, pose.root(), &local)?;
    let logits = binder.var(&mut g, store, &body.skin.name)?;
    let soft = g.softmax(logits, 1)?;

    let mass = foreground_mass(&points, &kin.numeric(&g), &body.skin, g.value(soft));
    let tau = cfg.model.cull_threshold;
    let kept: Vec<usize> = (0..points.len()).filter(|&i| mass[i] > 0.0 && mass[i] >= tau).collect();
    stats.evaluated = kept.len();

    let composited = if kept.is_empty() {
        g.constant(Tensor::zeros(&[hit.len(), 4]))
    } else {
        let flat: Vec<f64> = kept.iter().flat_map(|&i| points[i]).collect();
        let x = g.constant(Tensor::new(&[kept.len(), 3], flat)?);
        let (density, color) = shade(model, identity, &mut g, &mut binder, &kin, soft, x, progress)?;
        let sigma = g.scatter_rows(density, &kept, points.len())?;
        let sigma = g.reshape(sigma, &[hit.len(), m])?;
        let rgb = g.scatter_rows(color, &kept, points.len())?;
        g.composite(sigma, rgb, &spacing)?
    };
    let full = g.scatter_rows(composited, &hit, pixels.len())?;
    let parts = g.split(full, 1, &[3, 1])?;
    let alpha = parts[1];
    let clear = g.affine(alpha, -1.0, 1.0)?;
    let background = g.constant(Tensor::new(&[1, 3], cfg.render.background.to_vec())?);
    let fill = g.mul(clear, background)?;
    let color = g.add(parts[0], fill)?;
    Ok(RenderPass {
        graph: g,
        binder,
        color,
        alpha,
        stats,
    })
}

/// Density (`B × 1`) and color (`B × 3`) at observation points `x`.
#[allow(clippy::too_many_arguments)]
fn shade(
    model: &Model,
    identity: usize,
    g: &mut Graph,
    binder: &mut Binder,
    kin: &GraphKinematics,
    soft: Var,
    x: Var,
    progress: f64,
) -> Result<(Var, Var), RenderError> {
    let cfg = &model.config;
    let store = &model.store;
    let body = model.body(identity)?;
    let ow = observation_weights(g, x, kin, &body.skin, soft)?;
    let xc = inverse_lbs(g, &ow.candidates, ow.weights)?;

    let code = if cfg.ablation.use_identity_codes {
        Some(get_code(g, binder, store, identity)?)
    } else {
        None
    };
    let joints = kin.root_relative_joints(g)?;
    let conditioned = if cfg.ablation.use_pose_condition {
        let pose = pose_code(g, binder, store, joints)?;
        Some(match code {
            Some(s) => pose_conditioned_code(g, binder, store, s, pose, cfg.model.attention_scaling)?.code,
            None => codeless_pose_feature(g, binder, store, pose)?,
        })
    } else {
        code
    };
    let joints_flat = g.reshape(joints, &[1, 3 * model.joints()])?;
    let bands = model.nonrigid.encoding.bands;
    let band_weights = if cfg.model.anneal_nonrigid {
        let ramp = (progress * cfg.train.iterations as f64 / cfg.model.anneal_iterations.max(1) as f64).min(1.0);
        annealing_weights(bands, ramp)
    } else {
        vec![1.0; bands]
    };
    let dx = model
        .nonrigid
        .offset(g, binder, store, xc, joints_flat, conditioned, &band_weights)?;
    let xc = g.add(xc, dx)?;
    let Radiance { color, density } = model.canonical.radiance(g, binder, store, xc, code)?;
    let density = if cfg.model.mass_weighted_density {
        g.mul(density, ow.mass)?
    } else {
        density
    };
    Ok((density, color))
}

/// Square patch of pixels with top-left corner `(u0, v0)`, row-major.
pub fn patch_pixels(u0: usize, v0: usize, size: usize) -> Vec<(usize, usize)> {
    (0..size).flat_map(|dv| (0..size).map(move |du| (u0 + du, v0 + dv))).collect()
}

/// Renders a `size × size` patch with stratified sampling.
pub fn render_patch(
    model: &Model,
    identity: usize,
    pose: &PoseFrame,
    corner: (usize, usize),
    size: usize,
    rng: &mut impl Rng,
) -> Result<RenderPass, RenderError> {
    let pixels = patch_pixels(corner.0, corner.1, size);
    render_rays(model, identity, pose, &pixels, Sampling::Stratified(rng), 1.0)
}

/// Row-major RGB (or single-channel) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = (v * self.width + u) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Quantizes to 8 bits and writes a PNG.
    pub fn save_png(&self, path: &std::path::Path) -> Result<(), image::ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
    }

    pub fn load_png(path: &std::path::Path, channels: usize) -> Result<Self, image::ImageError> {
        let img = image::open(path)?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let bytes = if channels == 1 {
            img.into_luma8().into_raw()
        } else {
            img.into_rgb8().into_raw()
        };
        Ok(Self {
            width,
            height,
            channels,
            data: bytes.into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }

    /// Rounds values to the 8-bit grid the PNG stores.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
            ..self.clone()
        }
    }
}

/// Rays per tape when rendering whole images.
const IMAGE_CHUNK: usize = 256;

/// Full-resolution render with midpoint sampling; returns color and alpha.
pub fn render_image(model: &Model, identity: usize, pose: &PoseFrame) -> Result<(Image, Image), RenderError> {
    let cam = &pose.camera;
    let pixels: Vec<(usize, usize)> = (0..cam.height).flat_map(|v| (0..cam.width).map(move |u| (u, v))).collect();
    let mut color = Image::new(cam.width, cam.height, 3);
    let mut alpha = Image::new(cam.width, cam.height, 1);
    for (c, chunk) in pixels.chunks(IMAGE_CHUNK).enumerate() {
        let pass = render_rays::<rand_chacha::ChaCha8Rng>(model, identity, pose, chunk, Sampling::Midpoint, 1.0)?;
        let start = c * IMAGE_CHUNK;
        color.data[3 * start..3 * (start + chunk.len())].copy_from_slice(pass.color_values());
        alpha.data[start..start + chunk.len()].copy_from_slice(pass.alpha_values());
    }
    Ok((color, alpha))
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

