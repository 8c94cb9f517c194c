mod common;

use common::{apply3, mat3, max_abs_diff, random_orientations, random_tensor, rng, toy_topology};
use polyhuman::diffcore::{rodrigues_matrix, Graph, GridSpec, Tensor};
use polyhuman::params::{Binder, Group, ParamStore};
use polyhuman::renderer::CameraModel;
use polyhuman::skeleton::{
    foreground_mass, forward_kinematics, inverse_lbs, observation_weights, pose_correct, GraphKinematics,
    Kinematics, Mat3, PoseCorrector, SkeletonError, SkeletonTopology, SkinInit, SkinningField, Vec3,
};
use proptest::prelude::*;
use rand::Rng;

/// Global rotations and joints by walking each chain from the root.
fn chain_oracle(t: &SkeletonTopology, root: Vec3, omegas: &[Vec3]) -> (Vec<Mat3>, Vec<Vec3>) {
    let k = t.joints();
    let mut rots = Vec::new();
    let mut joints = Vec::new();
    for j in 0..k {
        let mut chain = vec![j];
        while let Some(p) = t.parents[*chain.last().unwrap()] {
            chain.push(p);
        }
        chain.reverse();
        let mut a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut pos = root;
        for (step, &c) in chain.iter().enumerate() {
            if step > 0 {
                let moved = apply3(&a, t.rest_offsets[c]);
                pos = std::array::from_fn(|d| pos[d] + moved[d]);
            }
            a = mat3(&a, &rodrigues_matrix(omegas[c]));
        }
        rots.push(a);
        joints.push(pos);
    }
    (rots, joints)
}

fn soft_field(g: &mut Graph, t: &SkeletonTopology, res: usize, seed: u64) -> (SkinningField, polyhuman::diffcore::Var) {
    let field = SkinningField::new("skin", t, res, 0.25);
    let init = SkinInit::BonePrior { background_logit: -2.0, width: 0.1, noise_std: 0.05 };
    let logits = field.init_logits(t, init, &mut rng(seed));
    let l = g.param(logits);
    let soft = g.softmax(l, 1).unwrap();
    (field, soft)
}

fn rest_kinematics(g: &mut Graph, t: &SkeletonTopology) -> GraphKinematics {
    let local = pose_correct(g, &vec![[0.0; 3]; t.joints()], None).unwrap();
    GraphKinematics::build(g, t, t.rest_positions()[0], &local).unwrap()
}

fn points_in(grid: &GridSpec, n: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| std::array::from_fn(|d| r.random_range(grid.min[d]..grid.max[d])))
        .collect()
}

#[test]
fn malformed_trees_are_rejected() {
    let o = [0.0, 0.1, 0.0];
    assert_eq!(SkeletonTopology::new(vec![], vec![], vec![]), Err(SkeletonError::Empty));
    assert_eq!(
        SkeletonTopology::new(vec![Some(0)], vec![o], vec![o]),
        Err(SkeletonError::RootHasParent)
    );
    assert_eq!(
        SkeletonTopology::new(vec![None, Some(2), Some(0)], vec![o; 3], vec![o; 3]),
        Err(SkeletonError::BadParent { joint: 1, parent: 2 })
    );
    assert_eq!(
        SkeletonTopology::new(vec![None, None], vec![o; 2], vec![o; 2]),
        Err(SkeletonError::SecondRoot(1))
    );
    assert_eq!(
        SkeletonTopology::new(vec![None, Some(0)], vec![o; 2], vec![o]),
        Err(SkeletonError::JointCount { expected: 2, got: 1 })
    );
}

#[test]
fn t_pose_inverse_lbs_is_identity_on_10k_points() {
    let t = toy_topology(3, 6);
    let mut g = Graph::new();
    let (field, soft) = soft_field(&mut g, &t, 12, 1);
    let kin = rest_kinematics(&mut g, &t);
    let pts = points_in(&field.grid, 10_000, 2);
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    let x = g.constant(Tensor::new(&[pts.len(), 3], flat.clone()).unwrap());
    let ow = observation_weights(&mut g, x, &kin, &field, soft).unwrap();
    assert!(g.value(ow.mass).data().iter().all(|&m| m > 0.0));
    let xc = inverse_lbs(&mut g, &ow.candidates, ow.weights).unwrap();
    let err = max_abs_diff(g.value(xc).data(), &flat);
    assert!(err < 1e-12, "max |x_c − x| = {err:e}");
}

#[test]
fn weights_are_invariant_to_positive_rescaling() {
    let t = toy_topology(5, 6);
    let orientations = random_orientations(6, 0.8, 9);
    for factor in [1e-3, 0.5, 7.0, 1e4] {
        let mut g = Graph::new();
        let (field, soft) = soft_field(&mut g, &t, 10, 3);
        let local = pose_correct(&mut g, &orientations, None).unwrap();
        let kin = GraphKinematics::build(&mut g, &t, [0.1, -0.2, 0.05], &local).unwrap();
        let pts = points_in(&field.grid, 500, 4);
        let x = g.constant(Tensor::new(&[pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap());
        let base = observation_weights(&mut g, x, &kin, &field, soft).unwrap();
        let scaled_soft = g.scale(soft, factor).unwrap();
        let scaled = observation_weights(&mut g, x, &kin, &field, scaled_soft).unwrap();
        let err = max_abs_diff(g.value(base.weights).data(), g.value(scaled.weights).data());
        assert!(err < 1e-12, "factor {factor}: {err:e}");
    }
}

#[test]
fn single_bone_weights_are_one() {
    let t = toy_topology(1, 1);
    let mut g = Graph::new();
    let (field, soft) = soft_field(&mut g, &t, 6, 2);
    let kin = rest_kinematics(&mut g, &t);
    let pts = points_in(&field.grid, 200, 5);
    let x = g.constant(Tensor::new(&[pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap());
    let ow = observation_weights(&mut g, x, &kin, &field, soft).unwrap();
    assert_eq!(g.shape(ow.weights), &[200, 1]);
    for &w in g.value(ow.weights).data() {
        assert!((w - 1.0).abs() < 1e-15);
    }
}

#[test]
fn points_outside_every_volume_have_zero_mass_and_weight() {
    let t = toy_topology(2, 6);
    let mut g = Graph::new();
    let (field, soft) = soft_field(&mut g, &t, 8, 2);
    let kin = rest_kinematics(&mut g, &t);
    let x = g.constant(Tensor::new(&[2, 3], vec![50.0, 0.0, 0.0, 0.0, -40.0, 3.0]).unwrap());
    let ow = observation_weights(&mut g, x, &kin, &field, soft).unwrap();
    assert_eq!(g.value(ow.mass).data(), &[0.0, 0.0]);
    assert!(g.value(ow.weights).data().iter().all(|&w| w == 0.0));
    let mass = foreground_mass(&[[50.0, 0.0, 0.0]], &kin.numeric(&g), &field, g.value(soft));
    assert_eq!(mass, vec![0.0]);
}

#[test]
fn foreground_mass_matches_graph_mass() {
    let t = toy_topology(4, 6);
    let orientations = random_orientations(6, 0.5, 1);
    let mut g = Graph::new();
    let (field, soft) = soft_field(&mut g, &t, 10, 6);
    let local = pose_correct(&mut g, &orientations, None).unwrap();
    let kin = GraphKinematics::build(&mut g, &t, [0.0, 0.1, 0.0], &local).unwrap();
    let pts = points_in(&field.grid, 300, 8);
    let x = g.constant(Tensor::new(&[pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap());
    let ow = observation_weights(&mut g, x, &kin, &field, soft).unwrap();
    let plain = foreground_mass(&pts, &kin.numeric(&g), &field, g.value(soft));
    assert!(max_abs_diff(&plain, g.value(ow.mass).data()) < 1e-12);
}

#[test]
fn grid_sample_matches_nested_loop_trilinear() {
    let grid = GridSpec { res: 5, min: [-1.0, -0.5, 0.0], max: [1.0, 1.5, 0.8] };
    let channels = 3;
    let values = random_tensor(&[grid.vertices(), channels], -1.0, 1.0, 17);
    let pts = points_in(&grid, 400, 18);
    let mut g = Graph::new();
    let v = g.constant(values.clone());
    let x = g.constant(Tensor::new(&[pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap());
    for ch in 0..channels {
        let s = g.grid_sample(v, x, grid, ch).unwrap();
        for (b, p) in pts.iter().enumerate() {
            let mut cell = [0usize; 3];
            let mut f = [0.0; 3];
            for a in 0..3 {
                let u = (p[a] - grid.min[a]) / (grid.max[a] - grid.min[a]) * (grid.res - 1) as f64;
                cell[a] = (u.floor() as usize).min(grid.res - 2);
                f[a] = u - cell[a] as f64;
            }
            let mut expect = 0.0;
            for dx in 0..2 {
                for dy in 0..2 {
                    for dz in 0..2 {
                        let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
                        let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
                        let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
                        let vert = ((cell[0] + dx) * grid.res + cell[1] + dy) * grid.res + cell[2] + dz;
                        expect += wx * wy * wz * values.data()[vert * channels + ch];
                    }
                }
            }
            let got = g.value(s).data()[b];
            assert!((got - expect).abs() < 1e-12, "point {b} channel {ch}: {got} vs {expect}");
        }
    }
}

#[test]
fn vertices_reproduce_stored_values() {
    let grid = GridSpec { res: 4, min: [0.0; 3], max: [1.0, 2.0, 3.0] };
    let values = random_tensor(&[grid.vertices(), 1], -1.0, 1.0, 3);
    let mut pts = Vec::new();
    for ix in 0..4 {
        for iy in 0..4 {
            for iz in 0..4 {
                pts.extend(grid.vertex_position(ix, iy, iz));
            }
        }
    }
    let mut g = Graph::new();
    let v = g.constant(values.clone());
    let x = g.constant(Tensor::new(&[64, 3], pts).unwrap());
    let s = g.grid_sample(v, x, grid, 0).unwrap();
    assert!(max_abs_diff(g.value(s).data(), values.data()) < 1e-12);
}

#[test]
fn kinematics_match_chain_oracle() {
    let t = toy_topology(8, 8);
    let omegas = random_orientations(8, 1.5, 4);
    let root = [0.3, -0.1, 0.7];
    let (rots, joints) = chain_oracle(&t, root, &omegas);
    let kin = Kinematics::from_orientations(&t, root, &omegas);
    for j in 0..8 {
        assert!(max_abs_diff(&kin.rotations[j], &rots[j]) < 1e-12);
        assert!(max_abs_diff(&kin.joints[j], &joints[j]) < 1e-12);
    }
}

#[test]
fn t_pose_transforms_are_identity() {
    let t = toy_topology(6, 8);
    let pose = t.rest_pose(CameraModel::default());
    let tf = forward_kinematics(&t, &pose);
    let mut r = rng(1);
    for _ in 0..100 {
        let x: Vec3 = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        for k in 0..8 {
            assert!(max_abs_diff(&tf.apply(k, x), &x) < 1e-14);
        }
    }
}

#[test]
fn rest_pose_round_trips_through_retarget() {
    let t = toy_topology(2, 8);
    let pose = t.rest_pose(CameraModel::default());
    let again = pose.retarget(&t, CameraModel::default());
    assert!(max_abs_diff(&pose.joints.concat(), &again.joints.concat()) < 1e-15);
}

#[test]
fn graph_corrector_starts_at_identity() {
    let corr = PoseCorrector::new("pc", 6, 8, 1);
    let mut store = ParamStore::new();
    corr.init(&mut store, Group::Slow, &mut rng(2));
    assert_eq!(store.count(), corr.param_count());
    let omegas = random_orientations(6, 1.0, 3);
    let mut g = Graph::new();
    let mut binder = Binder::new();
    let off = corr.offsets(&mut g, &mut binder, &store, &omegas).unwrap();
    assert!(g.value(off).data().iter().all(|&v| v == 0.0));
    let local = pose_correct(&mut g, &omegas, Some(off)).unwrap();
    for (j, l) in local.iter().enumerate() {
        assert!(max_abs_diff(g.value(*l).data(), &rodrigues_matrix(omegas[j])) < 1e-15);
    }
}

#[test]
fn small_correction_is_first_order_rotation() {
    let omegas = random_orientations(3, 1.0, 5);
    let delta = random_orientations(3, 1e-4, 6);
    let mut g = Graph::new();
    let off = g.constant(Tensor::new(&[3, 3], delta.iter().flatten().copied().collect()).unwrap());
    let local = pose_correct(&mut g, &omegas, Some(off)).unwrap();
    for j in 0..3 {
        let [a, b, c] = delta[j];
        // I + [δ]×
        let first = [1.0, -c, b, c, 1.0, -a, -b, a, 1.0];
        let expect = mat3(&rodrigues_matrix(omegas[j]), &first);
        let err = max_abs_diff(g.value(local[j]).data(), &expect);
        assert!(err < 1e-7, "joint {j}: {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_undoes_forward(seed in 0u64..10_000, spread in 0.0f64..3.0) {
        let t = toy_topology(seed % 8, 8);
        let omegas = random_orientations(8, spread, seed);
        let root = [0.2, 0.1, -0.4];
        let (rots, joints) = chain_oracle(&t, root, &omegas);
        let tf = forward_kinematics(&t, &polyhuman::skeleton::PoseFrame {
            joints: joints.clone(),
            orientations: omegas.clone(),
            camera: CameraModel::default(),
        });
        let rest = t.rest_positions();
        let mut r = rng(seed ^ 7);
        for k in 0..8 {
            let p: Vec3 = std::array::from_fn(|_| r.random_range(-1.0..1.0));
            // canonical p posed by bone k, then mapped back
            let local: Vec3 = std::array::from_fn(|d| p[d] - rest[k][d]);
            let moved = apply3(&rots[k], local);
            let x: Vec3 = std::array::from_fn(|d| joints[k][d] + moved[d]);
            let back = tf.apply(k, x);
            prop_assert!(max_abs_diff(&back, &p) < 1e-10);
        }
    }

    #[test]
    fn bone_transforms_are_rigid(seed in 0u64..10_000) {
        let t = toy_topology(seed % 8, 8);
        let kin = Kinematics::from_orientations(&t, [0.0; 3], &random_orientations(8, 2.0, seed));
        let tf = kin.bone_transforms(&t);
        let mut r = rng(seed);
        let x: Vec3 = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let y: Vec3 = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let dist = |a: Vec3, b: Vec3| (0..3).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>().sqrt();
        for k in 0..8 {
            prop_assert!((dist(tf.apply(k, x), tf.apply(k, y)) - dist(x, y)).abs() < 1e-12);
            prop_assert!((polyhuman::skeleton::det(&tf.rotations[k]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_kinematics_agree_with_numeric(seed in 0u64..10_000) {
        let t = toy_topology(seed % 8, 6);
        let omegas = random_orientations(6, 1.5, seed);
        let root = [0.1, 0.2, 0.3];
        let mut g = Graph::new();
        let local = pose_correct(&mut g, &omegas, None).unwrap();
        let kin = GraphKinematics::build(&mut g, &t, root, &local).unwrap();
        let graph = kin.numeric(&g);
        let plain = Kinematics::from_orientations(&t, root, &omegas).bone_transforms(&t);
        for k in 0..6 {
            prop_assert!(max_abs_diff(&graph.rotations[k], &plain.rotations[k]) < 1e-12);
            prop_assert!(max_abs_diff(&graph.translations[k], &plain.translations[k]) < 1e-12);
        }
    }

    #[test]
    fn posed_weights_are_normalized(seed in 0u64..1000) {
        let t = toy_topology(seed % 8, 6);
        let mut g = Graph::new();
        let (field, soft) = soft_field(&mut g, &t, 8, seed);
        let local = pose_correct(&mut g, &random_orientations(6, 0.7, seed), None).unwrap();
        let kin = GraphKinematics::build(&mut g, &t, [0.0; 3], &local).unwrap();
        let pts = points_in(&field.grid, 50, seed + 1);
        let x = g.constant(Tensor::new(&[50, 3], pts.iter().flatten().copied().collect()).unwrap());
        let ow = observation_weights(&mut g, x, &kin, &field, soft).unwrap();
        let w = g.value(ow.weights).data();
        let mass = g.value(ow.mass).data();
        for b in 0..50 {
            let s: f64 = w[b * 6..(b + 1) * 6].iter().sum();
            if mass[b] > 0.0 {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }
}
