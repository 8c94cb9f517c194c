//! Helpers shared by the integration tests.
#![allow(dead_code)]

use polyhuman::config::Config;
use polyhuman::diffcore::Tensor;
use polyhuman::skeleton::{Mat3, SkeletonTopology, Vec3};
use polyhuman::synthdata::make_identity;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn toy_topology(seed: u64, bones: usize) -> SkeletonTopology {
    make_identity(seed, bones).topology
}

pub fn random_orientations(k: usize, spread: f64, seed: u64) -> Vec<Vec3> {
    let mut r = rng(seed);
    (0..k)
        .map(|_| std::array::from_fn(|_| r.random_range(-spread..spread)))
        .collect()
}

/// 3×3 row-major product written out longhand.
pub fn mat3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
            }
        }
    }
    out
}

pub fn apply3(m: &Mat3, v: Vec3) -> Vec3 {
    std::array::from_fn(|i| (0..3).map(|k| m[i * 3 + k] * v[k]).sum())
}

/// Very small model for tests that need a full pipeline.
pub fn tiny_config() -> Config {
    polyhuman::verify::gradcheck_config(&Config::default())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
