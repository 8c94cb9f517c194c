//! Procedural toy bodies made of capsules, their analytic radiance field,
//! an oracle renderer, pose sequences, cameras and the on-disk dataset.
//!
//! Dataset layout under the output directory:
//!
//! ```text
//! manifest.toml              identities, bodies, frame list, splits
//! cameras.txt                one camera per line
//! poses/<id>.txt             one frame per line
//! images/<id>/<frame>.png    8-bit RGB
//! masks/<id>/<frame>.png     8-bit gray, 255 inside the body
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{substream, Config};
use crate::diffcore::composite_ray;
use crate::renderer::{generate_rays, midpoint_sample, deltas, CameraModel, Image, SceneBox};
use crate::skeleton::{segment_distance, Kinematics, PoseFrame, SkeletonTopology, Vec3};

pub const FORMAT_VERSION: u32 = 1;

/// Density inside a capsule.
pub const DENSITY_AMPLITUDE: f64 = 40.0;
/// Width of the capsule surface ramp.
pub const EDGE_WIDTH: f64 = 0.04;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

// ── toy bodies ──────────────────────────────────────────────────────────

struct TemplateJoint {
    parent: Option<usize>,
    offset: Vec3,
    tip: Vec3,
    radius: f64,
    /// Index into the palette pair: 0 torso, 1 limbs.
    tone: usize,
}

/// Pelvis, chest, hips, shoulders, knees; any prefix is a valid tree.
const TEMPLATE: [TemplateJoint; 8] = [
    TemplateJoint { parent: None, offset: [0.0, 0.0, 0.0], tip: [0.0, 0.42, 0.0], radius: 0.13, tone: 0 },
    TemplateJoint { parent: Some(0), offset: [0.0, 0.42, 0.0], tip: [0.0, 0.25, 0.0], radius: 0.11, tone: 0 },
    TemplateJoint { parent: Some(0), offset: [0.11, -0.05, 0.0], tip: [0.0, -0.42, 0.0], radius: 0.09, tone: 1 },
    TemplateJoint { parent: Some(0), offset: [-0.11, -0.05, 0.0], tip: [0.0, -0.42, 0.0], radius: 0.09, tone: 1 },
    TemplateJoint { parent: Some(1), offset: [0.17, 0.0, 0.0], tip: [0.42, 0.0, 0.0], radius: 0.08, tone: 1 },
    TemplateJoint { parent: Some(1), offset: [-0.17, 0.0, 0.0], tip: [-0.42, 0.0, 0.0], radius: 0.08, tone: 1 },
    TemplateJoint { parent: Some(2), offset: [0.0, -0.42, 0.0], tip: [0.0, -0.38, 0.0], radius: 0.08, tone: 0 },
    TemplateJoint { parent: Some(3), offset: [0.0, -0.42, 0.0], tip: [0.0, -0.38, 0.0], radius: 0.08, tone: 0 },
];

/// Torso and limb colors, indexed by `seed mod 8`. Any two palettes differ
/// by at least 0.3 in some channel of each tone.
const PALETTES: [[[f64; 3]; 2]; 8] = [
    [[0.85, 0.20, 0.15], [0.20, 0.30, 0.80]],
    [[0.15, 0.65, 0.25], [0.90, 0.75, 0.15]],
    [[0.55, 0.20, 0.75], [0.20, 0.80, 0.80]],
    [[0.95, 0.55, 0.10], [0.30, 0.30, 0.30]],
    [[0.15, 0.40, 0.90], [0.85, 0.25, 0.55]],
    [[0.50, 0.30, 0.10], [0.50, 0.90, 0.40]],
    [[0.20, 0.15, 0.45], [0.95, 0.55, 0.55]],
    [[0.70, 0.90, 0.60], [0.55, 0.10, 0.20]],
];

const COLOR_JITTER: f64 = 0.04;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyIdentity {
    pub seed: u64,
    pub topology: SkeletonTopology,
    pub radii: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub amplitude: f64,
}

/// Deterministic toy body with `bones` capsules.
pub fn make_identity(seed: u64, bones: usize) -> ToyIdentity {
    assert!((1..=TEMPLATE.len()).contains(&bones), "toy bodies have 1..=8 bones");
    let mut rng = substream(seed, "identity");
    let size = rng.random_range(0.9..1.1);
    let girth = rng.random_range(0.85..1.15);
    let palette = PALETTES[(seed % PALETTES.len() as u64) as usize];
    let mut parents = Vec::new();
    let mut offsets = Vec::new();
    let mut tips = Vec::new();
    let mut radii = Vec::new();
    let mut colors = Vec::new();
    for t in &TEMPLATE[..bones] {
        let limb = size * rng.random_range(0.92..1.08);
        parents.push(t.parent);
        offsets.push(t.offset.map(|v| v * size));
        tips.push(t.tip.map(|v| v * limb));
        radii.push((t.radius * girth).clamp(0.07, 0.14));
        let base = palette[t.tone];
        colors.push(base.map(|c| (c + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0)));
    }
    ToyIdentity {
        seed,
        topology: SkeletonTopology::new(parents, offsets, tips).expect("template prefix is a tree"),
        radii,
        colors,
        amplitude: DENSITY_AMPLITUDE,
    }
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Posed capsules of an identity: segment endpoints per bone.
pub fn posed_capsules(id: &ToyIdentity, pose: &PoseFrame) -> Vec<(Vec3, Vec3)> {
    Kinematics::from_orientations(&id.topology, pose.root(), &pose.orientations).segments(&id.topology)
}

/// Occupancy of each capsule at `x`: 1 inside `radius − EDGE_WIDTH`, 0
/// outside `radius`.
pub fn occupancies(id: &ToyIdentity, capsules: &[(Vec3, Vec3)], x: Vec3) -> Vec<f64> {
    capsules
        .iter()
        .zip(&id.radii)
        .map(|(&(a, b), &r)| smoothstep((r - segment_distance(x, a, b)) / EDGE_WIDTH))
        .collect()
}

/// Color and density at `x`: `σ = A·(1 − Π(1 − o_k))`, color the
/// occupancy-weighted mean of bone colors.
pub fn analytic_field_at(id: &ToyIdentity, capsules: &[(Vec3, Vec3)], x: Vec3) -> ([f64; 3], f64) {
    let occ = occupancies(id, capsules, x);
    let total: f64 = occ.iter().sum();
    if total == 0.0 {
        return ([0.0; 3], 0.0);
    }
    let mut color = [0.0; 3];
    for (o, c) in occ.iter().zip(&id.colors) {
        for d in 0..3 {
            color[d] += o * c[d] / total;
        }
    }
    let empty: f64 = occ.iter().map(|o| 1.0 - o).product();
    (color, id.amplitude * (1.0 - empty))
}

pub fn analytic_field(x: Vec3, pose: &PoseFrame, id: &ToyIdentity) -> ([f64; 3], f64) {
    analytic_field_at(id, &posed_capsules(id, pose), x)
}

/// Ground truth for one view: midpoint quadrature with `samples` per ray
/// inside the posed scene box, composited over `background`.
pub fn oracle_render(
    camera: &CameraModel,
    pose: &PoseFrame,
    id: &ToyIdentity,
    samples: usize,
    background: [f64; 3],
    box_margin: f64,
) -> (Image, Image) {
    let capsules = posed_capsules(id, pose);
    let scene = SceneBox::posed(&id.topology, pose, box_margin);
    let pixels: Vec<(usize, usize)> = (0..camera.height).flat_map(|v| (0..camera.width).map(move |u| (u, v))).collect();
    let rays = generate_rays(camera, &pixels, &scene).expect("pixels inside the image");
    let mut image = Image::new(camera.width, camera.height, 3);
    let mut mask = Image::new(camera.width, camera.height, 1);
    for (&(u, v), ray) in pixels.iter().zip(&rays) {
        let out = match ray {
            None => [0.0; 4],
            Some(ray) => {
                let depths = midpoint_sample(ray, samples);
                let spacing = deltas(ray, &depths);
                let mut sigma = Vec::with_capacity(samples);
                let mut rgb = Vec::with_capacity(3 * samples);
                for &t in &depths {
                    let (c, s) = analytic_field_at(id, &capsules, ray.at(t));
                    sigma.push(s);
                    rgb.extend_from_slice(&c);
                }
                composite_ray(&sigma, &rgb, &spacing)
            }
        };
        let px = image.pixel_mut(u, v);
        for d in 0..3 {
            px[d] = out[d] + (1.0 - out[3]) * background[d];
        }
        mask.pixel_mut(u, v)[0] = if out[3] > 0.5 { 1.0 } else { 0.0 };
    }
    (image, mask)
}

// ── motion and cameras ──────────────────────────────────────────────────

/// Per-frame joint state without a camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub joints: Vec<Vec3>,
    pub orientations: Vec<Vec3>,
}

impl PoseRecord {
    pub fn with_camera(&self, camera: &CameraModel) -> PoseFrame {
        PoseFrame {
            joints: self.joints.clone(),
            orientations: self.orientations.clone(),
            camera: camera.clone(),
        }
    }
}

/// Largest swing amplitude times angular speed stays below 0.2 rad/frame.
const MAX_SWING: f64 = 0.6;
const MAX_SPEED: f64 = 0.3;
const YAW_RANGE: f64 = 1.2;
const MAX_YAW_STEP: f64 = 0.1;

/// Sinusoidal joint swings with per-identity frequency and phase, plus a
/// root yaw sweep centered on zero, spanning at most `[−1.2, 1.2]` rad.
pub fn pose_sequence(id: &ToyIdentity, frames: usize) -> Vec<PoseRecord> {
    let mut rng = substream(id.seed, "motion");
    let k = id.topology.joints();
    let speed = rng.random_range(0.15..MAX_SPEED);
    let reverse = rng.random_bool(0.5);
    // swing axis and amplitude per joint; the root only turns
    let swings: Vec<(Vec3, f64, f64)> = (0..k)
        .map(|j| {
            let axis = match j {
                0 => [0.0, 0.0, 0.0],
                1 => [1.0, 0.0, 0.0],
                4 | 5 => [0.0, 0.0, 1.0],
                _ => [1.0, 0.0, 0.0],
            };
            let amp = if j == 1 { 0.25 } else { rng.random_range(0.3..MAX_SWING) };
            (axis, amp, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let yaw_step = if frames > 1 {
        (2.0 * YAW_RANGE / (frames - 1) as f64).min(MAX_YAW_STEP)
    } else {
        0.0
    };
    (0..frames)
        .map(|f| {
            let centered = f as f64 - (frames as f64 - 1.0) / 2.0;
            let yaw = yaw_step * centered * if reverse { -1.0 } else { 1.0 };
            let orientations: Vec<Vec3> = swings
                .iter()
                .enumerate()
                .map(|(j, &(axis, amp, phase))| {
                    if j == 0 {
                        [0.0, yaw, 0.0]
                    } else {
                        let a = amp * (speed * f as f64 + phase).sin();
                        axis.map(|v| v * a)
                    }
                })
                .collect();
            let root = [0.0, 0.03 * (speed * f as f64).sin(), 0.0];
            let kin = Kinematics::from_orientations(&id.topology, root, &orientations);
            PoseRecord {
                joints: kin.joints,
                orientations,
            }
        })
        .collect()
}

/// Vertical point the cameras look at.
const LOOK_HEIGHT: f64 = -0.1;

/// Camera 0 looks along −z; held-out cameras alternate ±45°, ±90°, … in
/// azimuth around the vertical axis.
pub fn make_cameras(size: usize, focal: f64, distance: f64, novel: usize) -> Vec<CameraModel> {
    let mut azimuths = vec![0.0f64];
    for i in 0..novel {
        let step = (i / 2 + 1) as f64 * std::f64::consts::FRAC_PI_4;
        azimuths.push(if i % 2 == 0 { step } else { -step });
    }
    azimuths
        .into_iter()
        .map(|a| {
            let eye = [distance * a.sin(), LOOK_HEIGHT + 0.3, distance * a.cos()];
            CameraModel::look_at(eye, [0.0, LOOK_HEIGHT, 0.0], [0.0, 1.0, 0.0], focal, size, size)
        })
        .collect()
}

// ── dataset ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub identity: usize,
    pub frame: usize,
    pub camera: usize,
    pub split: Split,
    pub image: String,
    pub mask: String,
}

/// In-memory dataset description; images are read on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub image_size: usize,
    pub background: [f64; 3],
    pub box_margin: f64,
    pub cameras: Vec<CameraModel>,
    pub train_camera: usize,
    pub identities: Vec<ToyIdentity>,
    pub poses: Vec<Vec<PoseRecord>>,
    pub frames: Vec<FrameEntry>,
}

impl Dataset {
    pub fn pose(&self, entry: &FrameEntry) -> PoseFrame {
        self.poses[entry.identity][entry.frame].with_camera(&self.cameras[entry.camera])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameEntry> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn topologies(&self) -> Vec<SkeletonTopology> {
        self.identities.iter().map(|i| i.topology.clone()).collect()
    }

    pub fn load_image(&self, entry: &FrameEntry) -> Result<Image, DataError> {
        let path = self.root.join(&entry.image);
        Image::load_png(&path, 3).map_err(|source| DataError::Image {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_mask(&self, entry: &FrameEntry) -> Result<Image, DataError> {
        let path = self.root.join(&entry.mask);
        Image::load_png(&path, 1).map_err(|source| DataError::Image {
            path: path.display().to_string(),
            source,
        })
    }

    /// Oracle image of identity `body` driven by `pose`.
    pub fn oracle(&self, body: usize, pose: &PoseFrame, samples: usize) -> (Image, Image) {
        oracle_render(&pose.camera, pose, &self.identities[body], samples, self.background, self.box_margin)
    }
}

/// Identity `i` of a dataset with root seed `seed`.
pub fn identity_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Writes the dataset described by `config` into `out`.
pub fn export_dataset(config: &Config, out: &Path) -> Result<Dataset, DataError> {
    let d = &config.dataset;
    let identities: Vec<ToyIdentity> = (0..d.identities)
        .map(|i| make_identity(identity_seed(config.seed, i), d.bones))
        .collect();
    let poses: Vec<Vec<PoseRecord>> = identities.iter().map(|id| pose_sequence(id, d.frames)).collect();
    let cameras = make_cameras(d.image_size, d.focal, d.camera_distance, d.novel_views);
    let mut frames = Vec::new();
    for i in 0..identities.len() {
        for f in 0..d.frames {
            for c in 0..cameras.len() {
                let name = format!("{f:03}_c{c}.png");
                frames.push(FrameEntry {
                    identity: i,
                    frame: f,
                    camera: c,
                    split: if c == 0 { Split::Train } else { Split::Test },
                    image: format!("images/{i}/{name}"),
                    mask: format!("masks/{i}/{name}"),
                });
            }
        }
    }
    let data = Dataset {
        root: out.to_path_buf(),
        image_size: d.image_size,
        background: config.render.background,
        box_margin: config.render.box_margin,
        cameras,
        train_camera: 0,
        identities,
        poses,
        frames,
    };
    write_dataset(&data, d.reference_samples)?;
    Ok(data)
}

fn write_dataset(data: &Dataset, samples: usize) -> Result<(), DataError> {
    let root = &data.root;
    for i in 0..data.identities.len() {
        for sub in ["images", "masks", "poses"] {
            let dir = if sub == "poses" { root.join(sub) } else { root.join(sub).join(i.to_string()) };
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }
    for entry in &data.frames {
        let pose = data.pose(entry);
        let (img, mask) = data.oracle(entry.identity, &pose, samples);
        for (im, rel) in [(&img, &entry.image), (&mask, &entry.mask)] {
            let path = root.join(rel);
            im.save_png(&path).map_err(|source| DataError::Image {
                path: path.display().to_string(),
                source,
            })?;
        }
    }
    for (i, seq) in data.poses.iter().enumerate() {
        let path = root.join("poses").join(format!("{i}.txt"));
        fs::write(&path, format_poses(seq)).map_err(io_err(&path))?;
    }
    let path = root.join("cameras.txt");
    fs::write(&path, format_cameras(&data.cameras)).map_err(io_err(&path))?;
    let path = root.join("manifest.toml");
    fs::write(&path, Manifest::from_dataset(data).to_toml()).map_err(io_err(&path))?;
    Ok(())
}

fn join_numbers<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values.into_iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

/// `frame  J_0.x J_0.y J_0.z … J_{K-1}.z  Ω_0.x … Ω_{K-1}.z`
pub fn format_poses(seq: &[PoseRecord]) -> String {
    let mut s = String::from("# frame, K joint positions (x y z), K axis-angles (x y z)\n");
    for (f, p) in seq.iter().enumerate() {
        s += &format!(
            "{f} {} {}\n",
            join_numbers(p.joints.iter().flatten()),
            join_numbers(p.orientations.iter().flatten())
        );
    }
    s
}

pub fn parse_poses(text: &str, joints: usize, path: &Path) -> Result<Vec<PoseRecord>, DataError> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let nums = parse_numbers(line, path)?;
        if nums.len() != 1 + 6 * joints || nums[0] as usize != out.len() {
            return Err(format_err(path, format!("bad pose line for frame {}", out.len())));
        }
        let triples = |s: &[f64]| s.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<Vec3>>();
        out.push(PoseRecord {
            joints: triples(&nums[1..1 + 3 * joints]),
            orientations: triples(&nums[1 + 3 * joints..]),
        });
    }
    Ok(out)
}

/// `index width height fx fy cx cy r00 r01 r02 r10 … r22 t0 t1 t2`
pub fn format_cameras(cameras: &[CameraModel]) -> String {
    let mut s = String::from("# index width height fx fy cx cy rotation(row-major, world to camera) translation\n");
    for (i, c) in cameras.iter().enumerate() {
        s += &format!(
            "{i} {} {} {}\n",
            c.width,
            c.height,
            join_numbers([c.fx, c.fy, c.cx, c.cy].iter().chain(&c.rotation).chain(&c.translation))
        );
    }
    s
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<CameraModel>, DataError> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let n = parse_numbers(line, path)?;
        if n.len() != 19 || n[0] as usize != out.len() {
            return Err(format_err(path, format!("bad camera line {}", out.len())));
        }
        let cam = CameraModel {
            width: n[1] as usize,
            height: n[2] as usize,
            fx: n[3],
            fy: n[4],
            cx: n[5],
            cy: n[6],
            rotation: n[7..16].try_into().expect("nine values"),
            translation: n[16..19].try_into().expect("three values"),
        };
        cam.validate().map_err(|m| format_err(path, m))?;
        out.push(cam);
    }
    Ok(out)
}

fn parse_numbers(line: &str, path: &Path) -> Result<Vec<f64>, DataError> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format_err(path, format!("not a number: {t}"))))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    image_size: usize,
    background: [f64; 3],
    box_margin: f64,
    train_camera: usize,
    cameras: String,
    identity: Vec<ManifestIdentity>,
    frame: Vec<FrameEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestIdentity {
    index: usize,
    seed: u64,
    /// Parent joint per joint, −1 for the root.
    parents: Vec<i64>,
    rest_offsets: Vec<Vec3>,
    bone_tips: Vec<Vec3>,
    radii: Vec<f64>,
    colors: Vec<[f64; 3]>,
    amplitude: f64,
    poses: String,
}

impl Manifest {
    fn from_dataset(d: &Dataset) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            image_size: d.image_size,
            background: d.background,
            box_margin: d.box_margin,
            train_camera: d.train_camera,
            cameras: "cameras.txt".into(),
            identity: d
                .identities
                .iter()
                .enumerate()
                .map(|(i, id)| ManifestIdentity {
                    index: i,
                    seed: id.seed,
                    parents: id.topology.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
                    rest_offsets: id.topology.rest_offsets.clone(),
                    bone_tips: id.topology.bone_tips.clone(),
                    radii: id.radii.clone(),
                    colors: id.colors.clone(),
                    amplitude: id.amplitude,
                    poses: format!("poses/{i}.txt"),
                })
                .collect(),
            frame: d.frames.clone(),
        }
    }

    fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Reads and validates a dataset written by [`export_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let path = root.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported format_version {}", m.format_version)));
    }
    let cam_path = root.join(&m.cameras);
    let cameras = parse_cameras(&fs::read_to_string(&cam_path).map_err(io_err(&cam_path))?, &cam_path)?;
    let mut identities = Vec::new();
    let mut poses = Vec::new();
    for (i, e) in m.identity.into_iter().enumerate() {
        if e.index != i {
            return Err(format_err(&path, "identities must be listed in index order"));
        }
        let parents = e.parents.iter().map(|&p| (p >= 0).then_some(p as usize)).collect();
        let topology = SkeletonTopology::new(parents, e.rest_offsets, e.bone_tips)
            .map_err(|err| format_err(&path, format!("identity {i}: {err}")))?;
        let k = topology.joints();
        let pose_path = root.join(&e.poses);
        let seq = parse_poses(&fs::read_to_string(&pose_path).map_err(io_err(&pose_path))?, k, &pose_path)?;
        poses.push(seq);
        identities.push(ToyIdentity {
            seed: e.seed,
            topology,
            radii: e.radii,
            colors: e.colors,
            amplitude: e.amplitude,
        });
    }
    for f in &m.frame {
        if f.identity >= identities.len() || f.camera >= cameras.len() || f.frame >= poses[f.identity].len() {
            return Err(format_err(&path, format!("frame entry {} refers to missing data", f.image)));
        }
        for rel in [&f.image, &f.mask] {
            let p = root.join(rel);
            let (w, h) = image::image_dimensions(&p).map_err(|source| DataError::Image {
                path: p.display().to_string(),
                source,
            })?;
            if (w as usize, h as usize) != (m.image_size, m.image_size) {
                return Err(format_err(&p, format!("expected {0}×{0} pixels, found {w}×{h}", m.image_size)));
            }
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        image_size: m.image_size,
        background: m.background,
        box_margin: m.box_margin,
        cameras,
        train_camera: m.train_camera,
        identities,
        poses,
        frames: m.frame,
    })
}
