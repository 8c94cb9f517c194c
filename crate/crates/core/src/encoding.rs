//! Sinusoidal positional encoding.
//!
//! For every input coordinate `v` (x, y, z in order) and band `b` in
//! `0..bands` the encoder emits `sin(2^b π v)` followed by `cos(2^b π v)`.
//! The layout is coordinate-major and band-inner; checkpoints depend on it.

use serde::{Deserialize, Serialize};

use crate::diffcore::{band_frequency, Graph, Tensor, TensorError, Var};

/// Bands used for joint positions: 3 coordinates × 2 × 6 = 36 features.
pub const JOINT_BANDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub bands: usize,
}

impl EncodingSpec {
    pub fn new(bands: usize) -> Result<Self, TensorError> {
        if bands < 1 {
            return Err(TensorError::Invalid("encoding needs at least one band".into()));
        }
        Ok(Self { bands })
    }

    /// Output width for inputs with `dims` coordinates.
    pub fn width(&self, dims: usize) -> usize {
        2 * self.bands * dims
    }
}

/// Encodes a `B × d` batch inside the graph.
pub fn positional_encode(g: &mut Graph, points: Var, spec: EncodingSpec) -> Result<Var, TensorError> {
    g.encode(points, spec.bands)
}

/// Encodes with a per-band weight in `[0, 1]`, broadcast over coordinates.
/// Used for coarse-to-fine annealing; all-ones weights equal plain encoding.
pub fn positional_encode_weighted(
    g: &mut Graph,
    points: Var,
    spec: EncodingSpec,
    band_weights: &[f64],
) -> Result<Var, TensorError> {
    let enc = g.encode(points, spec.bands)?;
    if band_weights.iter().all(|&w| w == 1.0) {
        return Ok(enc);
    }
    let dims = g.shape(points)[1];
    let mut mask = Vec::with_capacity(spec.width(dims));
    for _ in 0..dims {
        for &w in band_weights {
            mask.push(w);
            mask.push(w);
        }
    }
    let mask = g.constant(Tensor::new(&[spec.width(dims)], mask)?);
    g.mul(enc, mask)
}

/// Linear band ramp: band `b` is off until `progress·bands` passes `b`, then
/// fades in over one band width. `progress` is clamped to `[0, 1]`.
pub fn annealing_weights(bands: usize, progress: f64) -> Vec<f64> {
    let alpha = progress.clamp(0.0, 1.0) * bands as f64;
    (0..bands)
        .map(|b| {
            let x = (alpha - b as f64).clamp(0.0, 1.0);
            (1.0 - (std::f64::consts::PI * x).cos()) / 2.0
        })
        .collect()
}

/// Plain-array encoding of a single point, same layout as the graph op.
pub fn encode_point(p: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands * p.len());
    for &v in p {
        for b in 0..bands {
            let arg = band_frequency(b) * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}
