mod common;

use common::{max_abs_diff, random_orientations, rng, tiny_config, toy_topology};
use polyhuman::diffcore::{composite_ray, grad_check, Graph, Tensor};
use polyhuman::model::Model;
use polyhuman::renderer::{
    composite, deltas, generate_rays, midpoint_sample, patch_pixels, render_image, render_patch, stratified_sample,
    CameraModel, Image, Ray, RenderError, SampleBatch, SceneBox,
};
use polyhuman::skeleton::{PoseFrame, SkinInit};
use proptest::prelude::*;
use rand::Rng;

fn unit_box() -> SceneBox {
    SceneBox { min: [-1.0; 3], max: [1.0; 3] }
}

fn ray(near: f64, far: f64) -> Ray {
    Ray { origin: [0.0, 0.0, 5.0], direction: [0.0, 0.0, -1.0], near, far }
}

#[test]
fn principal_point_looks_along_the_axis() {
    let cam = CameraModel::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 110.0, 64, 64);
    let d = cam.direction(cam.cx, cam.cy);
    assert!(max_abs_diff(&d, &[0.0, 0.0, -1.0]) < 1e-15);
    // pixel (32, 32) has its center half a pixel off the principal point
    let rays = generate_rays(&cam, &[(31, 31), (32, 32)], &unit_box()).unwrap();
    let (a, b) = (rays[0].unwrap(), rays[1].unwrap());
    assert!((a.direction[0] + b.direction[0]).abs() < 1e-15);
    assert!((a.direction[1] + b.direction[1]).abs() < 1e-15);
    for r in [a, b] {
        let n: f64 = r.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(r.near > 0.0 && r.near < r.far);
        assert!((r.near - 3.0).abs() < 0.01 && (r.far - 5.0).abs() < 0.01);
    }
    // image x grows to the right, y downward
    let (u, v) = cam.project([0.5, 0.5, 0.0]);
    assert!(u > cam.cx && v < cam.cy);
}

#[test]
fn rays_missing_the_box_are_empty() {
    let cam = CameraModel::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 110.0, 64, 64);
    let small = SceneBox { min: [-0.1; 3], max: [0.1; 3] };
    let rays = generate_rays(&cam, &[(0, 0), (63, 5), (32, 32)], &small).unwrap();
    assert!(rays[0].is_none() && rays[1].is_none() && rays[2].is_some());
    let err = generate_rays(&cam, &[(64, 0)], &small).unwrap_err();
    assert!(matches!(err, RenderError::PixelOutOfBounds { u: 64, .. }));
    // a camera inside the box starts at depth zero
    assert_eq!(unit_box().intersect([0.0; 3], [1.0, 0.0, 0.0]), Some((0.0, 1.0)));
    assert_eq!(unit_box().intersect([0.0, 0.0, 3.0], [0.0, 0.0, 1.0]), None);
}

#[test]
fn empty_ray_renders_background() {
    let mut cfg = tiny_config();
    cfg.render.background = [0.25, 0.5, 0.75];
    let t = toy_topology(1, cfg.dataset.bones);
    let model = Model::new(&cfg, vec![t.clone()], &mut rng(1)).unwrap();
    let cam = CameraModel::look_at([0.0, 0.0, 6.0], [0.0; 3], [0.0, 1.0, 0.0], 30.0, 24, 24);
    let pose = t.rest_pose(cam);
    let pass = render_patch(&model, 0, &pose, (0, 0), 2, &mut rng(2)).unwrap();
    assert_eq!(pass.stats.empty_rays, 4);
    assert_eq!(pass.alpha_values(), &[0.0; 4]);
    assert_eq!(pass.color_values(), &[0.25, 0.5, 0.75].repeat(4)[..]);
}

#[test]
fn projection_round_trips() {
    let mut r = rng(3);
    let cams = polyhuman::synthdata::make_cameras(64, 130.0, 4.0, 4);
    for cam in &cams {
        cam.validate().unwrap();
        for _ in 0..200 {
            let (u, v) = (r.random_range(0.0..64.0), r.random_range(0.0..64.0));
            let depth = r.random_range(1.0..8.0);
            let d = cam.direction(u, v);
            let c = cam.center();
            let x: [f64; 3] = std::array::from_fn(|k| c[k] + depth * d[k]);
            let (pu, pv) = cam.project(x);
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }
}

#[test]
fn non_orthonormal_camera_is_rejected() {
    let mut cam = CameraModel::default();
    cam.rotation[0] = 1.1;
    assert!(cam.validate().is_err());
    let mut cam = CameraModel::default();
    cam.fx = 0.0;
    assert!(cam.validate().is_err());
}

#[test]
fn stratified_samples_occupy_their_bins() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let near = r.random_range(0.5..2.0);
        let far = near + r.random_range(0.1..4.0);
        let m = [1, 2, 7, 128][seed as usize % 4];
        let depths = stratified_sample(&ray(near, far), m, &mut r);
        assert_eq!(depths.len(), m);
        let bin = (far - near) / m as f64;
        for (i, &d) in depths.iter().enumerate() {
            let lo = near + i as f64 * bin;
            assert!(d >= lo - 1e-12 && d < lo + bin + 1e-12, "bin {i}");
        }
        assert!(depths.windows(2).all(|w| w[1] > w[0]));
    }
    let a = stratified_sample(&ray(1.0, 2.0), 16, &mut rng(9));
    let b = stratified_sample(&ray(1.0, 2.0), 16, &mut rng(9));
    assert_eq!(a, b);
}

#[test]
fn midpoints_and_deltas() {
    let r = ray(1.0, 3.0);
    let d = midpoint_sample(&r, 4);
    assert_eq!(d, vec![1.25, 1.75, 2.25, 2.75]);
    assert_eq!(deltas(&r, &d), vec![0.5, 0.5, 0.5, 0.5]);
    let d = vec![1.0, 1.1, 2.5];
    let dl = deltas(&r, &d);
    assert!(max_abs_diff(&dl, &[0.1, 1.4, 2.0 / 3.0]) < 1e-15);
}

#[test]
fn compositing_closed_forms() {
    // vacuum
    let out = composite_ray(&[0.0; 8], &[0.7; 24], &[0.1; 8]);
    assert_eq!(out, [0.0; 4]);
    // σδ = ln 2 on one sample
    let ln2 = std::f64::consts::LN_2;
    let c = [0.2, 0.4, 0.8];
    let out = composite_ray(&[ln2], &c, &[1.0]);
    assert_eq!(out[3], 0.5);
    assert!(max_abs_diff(&out[..3], &[0.1, 0.2, 0.4]) < 1e-16);
    // two samples: 0.5 c1 + 0.25 c2
    let c2 = [1.0, 0.0, 0.5];
    let rgb: Vec<f64> = c.iter().chain(&c2).copied().collect();
    let out = composite_ray(&[ln2, ln2], &rgb, &[1.0, 1.0]);
    let expect: Vec<f64> = (0..3).map(|k| 0.5 * c[k] + 0.25 * c2[k]).collect();
    assert!(max_abs_diff(&out[..3], &expect) < 1e-15);
    assert!((out[3] - 0.75).abs() < 1e-15);
}

#[test]
fn constant_medium_matches_beer_lambert() {
    let r = ray(0.5, 2.7);
    for sigma in [0.1, 1.0, 3.0, 20.0] {
        let mut rr = rng(sigma as u64);
        let depths = stratified_sample(&r, 128, &mut rr);
        let dl = deltas(&r, &depths);
        // medium fills [depth_0, far]; the first partial bin is excluded from the span
        let span: f64 = dl.iter().sum();
        let c = [0.3, 0.6, 0.9];
        let out = composite_ray(&vec![sigma; 128], &c.repeat(128), &dl);
        let analytic = 1.0 - (-sigma * span).exp();
        for k in 0..3 {
            let rel = (out[k] - c[k] * analytic).abs() / (c[k] * analytic);
            assert!(rel < 1e-3, "σ={sigma}: {rel:e}");
        }
        // midpoints cover exactly far − near
        let depths = midpoint_sample(&r, 128);
        let out = composite_ray(&vec![sigma; 128], &c.repeat(128), &deltas(&r, &depths));
        let analytic = 1.0 - (-sigma * (r.far - r.near)).exp();
        assert!((out[3] - analytic).abs() / analytic < 1e-12);
    }
}

#[test]
fn batch_composite_agrees_with_graph_op() {
    let mut r = rng(4);
    let (rays, m) = (5, 9);
    let sigma: Vec<f64> = (0..rays * m).map(|_| r.random_range(0.0..4.0)).collect();
    let rgb: Vec<f64> = (0..rays * m * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let dl: Vec<f64> = (0..rays * m).map(|_| r.random_range(0.01..0.3)).collect();
    let batch = SampleBatch {
        depths: (0..rays).map(|_| (0..m).map(|i| i as f64).collect()).collect(),
        colors: (0..rays)
            .map(|ray| (0..m).map(|s| std::array::from_fn(|k| rgb[(ray * m + s) * 3 + k])).collect())
            .collect(),
        densities: (0..rays).map(|ray| sigma[ray * m..(ray + 1) * m].to_vec()).collect(),
        deltas: (0..rays).map(|ray| dl[ray * m..(ray + 1) * m].to_vec()).collect(),
    };
    let (colors, alphas) = composite(&batch);
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(&[rays, m], sigma.clone()).unwrap());
    let c = g.constant(Tensor::new(&[rays * m, 3], rgb.clone()).unwrap());
    let out = g.composite(s, c, &dl).unwrap();
    for ray in 0..rays {
        let row = g.value(out).row(ray);
        assert!(max_abs_diff(&row[..3], &colors[ray]) < 1e-15);
        assert!((row[3] - alphas[ray]).abs() < 1e-15);
    }
    let report = grad_check(
        |g, s| {
            let c = g.constant(Tensor::new(&[rays * m, 3], rgb.clone())?);
            let o = g.composite(s, c, &dl)?;
            let w = g.constant(common::random_tensor(&[rays, 4], -1.0, 1.0, 5));
            let y = g.mul(o, w)?;
            g.sum(y)
        },
        &Tensor::new(&[rays, m], sigma).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6);
}

fn tiny_model(seed: u64) -> (Model, PoseFrame) {
    let cfg = tiny_config();
    let t = toy_topology(seed, cfg.dataset.bones);
    let model = Model::new(&cfg, vec![t.clone(), toy_topology(seed + 1, cfg.dataset.bones)], &mut rng(seed)).unwrap();
    let cam = CameraModel::look_at([0.0, 0.2, 4.0], [0.0, 0.2, 0.0], [0.0, 1.0, 0.0], 40.0, 24, 24);
    let pose = PoseFrame {
        orientations: random_orientations(t.joints(), 0.4, seed),
        ..t.rest_pose(cam.clone())
    }
    .retarget(&t, cam);
    (model, pose)
}

#[test]
fn patch_rendering_is_deterministic() {
    let (model, pose) = tiny_model(2);
    let a = render_patch(&model, 1, &pose, (8, 8), 6, &mut rng(7)).unwrap();
    let b = render_patch(&model, 1, &pose, (8, 8), 6, &mut rng(7)).unwrap();
    assert_eq!(a.color_values(), b.color_values());
    assert_eq!(a.alpha_values(), b.alpha_values());
    assert_eq!(a.stats.rays, 36);
    assert_eq!(a.stats.samples, (36 - a.stats.empty_rays) * model.config.render.samples_per_ray);
    assert!(a.stats.evaluated <= a.stats.samples);
    assert_eq!(patch_pixels(8, 8, 6).len(), 36);
}

#[test]
fn unknown_identity_is_an_error() {
    let (model, pose) = tiny_model(3);
    let err = render_patch(&model, 2, &pose, (0, 0), 2, &mut rng(1)).err().unwrap();
    assert!(matches!(err, RenderError::Model(_)));
}

#[test]
fn untrained_transparent_model_renders_background() {
    let mut cfg = tiny_config();
    cfg.model.skin_init = SkinInit::Noise { background_logit: 2.0, noise_std: 0.01 };
    cfg.model.density_bias = -12.0;
    let t = toy_topology(4, cfg.dataset.bones);
    let model = Model::new(&cfg, vec![t.clone()], &mut rng(4)).unwrap();
    let cam = CameraModel::look_at([0.0, 0.2, 4.0], [0.0, 0.2, 0.0], [0.0, 1.0, 0.0], 40.0, 24, 24);
    let pose = t.rest_pose(cam);
    let pass = render_patch(&model, 0, &pose, (6, 6), 12, &mut rng(5)).unwrap();
    assert!(pass.stats.evaluated > 0);
    assert!(pass.color_values().iter().all(|&c| (c - 1.0).abs() < 1e-3));
}

#[test]
fn full_image_matches_patches() {
    let (model, pose) = tiny_model(5);
    let (color, alpha) = render_image(&model, 0, &pose).unwrap();
    assert_eq!((color.width, color.height, color.channels), (24, 24, 3));
    // midpoint rendering of a single pixel equals the same pixel of the image
    let pass = polyhuman::renderer::render_rays::<rand_chacha::ChaCha8Rng>(
        &model,
        0,
        &pose,
        &[(12, 9)],
        polyhuman::renderer::Sampling::Midpoint,
        1.0,
    )
    .unwrap();
    assert!(max_abs_diff(pass.color_values(), color.pixel(12, 9)) < 1e-12);
    assert!((pass.alpha_values()[0] - alpha.pixel(12, 9)[0]).abs() < 1e-12);
}

#[test]
fn png_round_trip_is_quantized() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = Image::new(5, 3, 3);
    let mut r = rng(6);
    for v in &mut img.data {
        *v = r.random_range(0.0..1.0);
    }
    let path = dir.path().join("x.png");
    img.save_png(&path).unwrap();
    let back = Image::load_png(&path, 3).unwrap();
    assert_eq!(back, img.quantized());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compositing_weights_are_bounded(
        sigma in proptest::collection::vec(0.0f64..50.0, 1..40),
        delta in 0.001f64..0.5,
    ) {
        let m = sigma.len();
        let out = composite_ray(&sigma, &vec![1.0; 3 * m], &vec![delta; m]);
        prop_assert!(out[3] >= 0.0 && out[3] <= 1.0 + 1e-9);
        // with unit color, accumulated color equals total weight
        prop_assert!((out[0] - out[3]).abs() < 1e-12);
        // each individual weight is nonnegative
        let mut t = 1.0;
        for s in &sigma {
            let w = t * (1.0 - (-s * delta).exp());
            prop_assert!(w >= 0.0);
            t *= (-s * delta).exp();
        }
    }
}
