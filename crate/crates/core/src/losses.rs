//! Training objective and image metrics.
//!
//! The perceptual term is a substitute for a feature-network distance: the
//! L1 distance between horizontal and vertical finite differences of the two
//! patches, at every level of an average-pooling pyramid, averaged over
//! levels. Pyramid pooling and differencing are linear, so they run as
//! constant matrices applied to the residual `pred − gt`.

use crate::config::{Perceptual, TrainConfig};
use crate::diffcore::{Graph, Reduction, Tensor, TensorError, Var};
use crate::renderer::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub perceptual: Perceptual,
    pub scales: usize,
}

impl From<&TrainConfig> for LossConfig {
    fn from(t: &TrainConfig) -> Self {
        Self {
            lambda: t.lambda,
            perceptual: t.perceptual,
            scales: t.perceptual_scales,
        }
    }
}

/// Sum of squared differences.
pub fn l2_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var, TensorError> {
    if g.shape(pred) != g.shape(gt) {
        return Err(TensorError::ShapeMismatch {
            op: "l2_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(gt).to_vec(),
        });
    }
    let d = g.sub(pred, gt)?;
    let sq = g.square(d)?;
    g.sum(sq)
}

/// `n² × 3` → `(n/2)² × 3` 2×2 average pooling matrix.
fn pool_matrix(n: usize) -> Tensor {
    let h = n / 2;
    let mut m = Tensor::zeros(&[h * h, n * n]);
    for v in 0..h {
        for u in 0..h {
            for (dv, du) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                m.data_mut()[(v * h + u) * n * n + (2 * v + dv) * n + 2 * u + du] = 0.25;
            }
        }
    }
    m
}

/// Forward differences along rows (`horizontal`) or columns of an `n × n`
/// image stored row-major.
fn difference_matrix(n: usize, horizontal: bool) -> Tensor {
    let rows = n * (n - 1);
    let mut m = Tensor::zeros(&[rows, n * n]);
    let mut r = 0;
    for v in 0..n {
        for u in 0..n {
            let (a, b) = if horizontal {
                if u + 1 == n {
                    continue;
                }
                (v * n + u, v * n + u + 1)
            } else {
                if v + 1 == n {
                    continue;
                }
                (v * n + u, (v + 1) * n + u)
            };
            m.data_mut()[r * n * n + a] = -1.0;
            m.data_mut()[r * n * n + b] = 1.0;
            r += 1;
        }
    }
    m
}

/// Gradient-pyramid L1 distance between square patches given as
/// `size² × 3` row-major nodes.
pub fn perceptual_patch_loss(g: &mut Graph, pred: Var, gt: Var, size: usize, scales: usize) -> Result<Var, TensorError> {
    if scales == 0 || size >> (scales - 1) < 2 || size % (1 << (scales - 1)) != 0 {
        return Err(TensorError::Invalid(format!(
            "a {size}-pixel patch is too small for {scales} pyramid levels"
        )));
    }
    if g.shape(pred) != [size * size, 3] || g.shape(gt) != [size * size, 3] {
        return Err(TensorError::ShapeMismatch {
            op: "perceptual_patch_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(gt).to_vec(),
        });
    }
    let mut residual = g.sub(pred, gt)?;
    let mut n = size;
    let mut levels = Vec::with_capacity(scales);
    for level in 0..scales {
        if level > 0 {
            let p = g.constant(pool_matrix(n));
            residual = g.matmul(p, residual)?;
            n /= 2;
        }
        let mut term = None;
        for horizontal in [true, false] {
            let d = g.constant(difference_matrix(n, horizontal));
            let diff = g.matmul(d, residual)?;
            let a = g.abs(diff)?;
            let mean = g.reduce(a, Reduction::Mean, None)?;
            term = Some(match term {
                None => mean,
                Some(t) => g.add(t, mean)?,
            });
        }
        levels.push(term.expect("two directions"));
    }
    let stacked = g.concat(&levels, 0)?;
    g.mean(stacked)
}

pub struct LossTerms {
    pub total: Var,
    pub l2: Var,
    pub perceptual: Option<Var>,
}

/// `perceptual + λ·L2` over a set of patches; the perceptual term is averaged
/// over patches, L2 summed over every ray.
pub fn total_loss(
    g: &mut Graph,
    patches: &[(Var, Var)],
    size: usize,
    cfg: &LossConfig,
) -> Result<LossTerms, TensorError> {
    let mut l2_parts = Vec::with_capacity(patches.len());
    let mut perc_parts = Vec::new();
    for &(pred, gt) in patches {
        l2_parts.push(l2_loss(g, pred, gt)?);
        if cfg.perceptual == Perceptual::GradientL1 {
            perc_parts.push(perceptual_patch_loss(g, pred, gt, size, cfg.scales)?);
        }
    }
    let l2 = g.concat(&l2_parts, 0)?;
    let l2 = g.sum(l2)?;
    let weighted = g.scale(l2, cfg.lambda)?;
    let (total, perceptual) = if perc_parts.is_empty() {
        (weighted, None)
    } else {
        let p = g.concat(&perc_parts, 0)?;
        let p = g.mean(p)?;
        (g.add(p, weighted)?, Some(p))
    };
    Ok(LossTerms { total, l2, perceptual })
}

/// Peak signal-to-noise ratio for values in `[0, 1]`; identical inputs give
/// [`PSNR_CAP`].
pub fn psnr(img: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(img.len(), gt.len(), "psnr needs equal sizes");
    let mse = img.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("image {width}×{height} is smaller than the {window}-pixel SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("images differ in size")]
    SizeMismatch,
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalized 2-D Gaussian window, row-major.
pub fn ssim_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Channel mean.
pub fn grayscale(img: &Image) -> Vec<f64> {
    img.data
        .chunks(img.channels)
        .map(|px| px.iter().sum::<f64>() / img.channels as f64)
        .collect()
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows of the
/// grayscale images.
pub fn ssim(img: &Image, gt: &Image) -> Result<f64, MetricError> {
    if img.width != gt.width || img.height != gt.height {
        return Err(MetricError::SizeMismatch);
    }
    let (w, h) = (img.width, img.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let (a, b) = (grayscale(img), grayscale(gt));
    let win = ssim_window();
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..SSIM_WINDOW {
                for x in 0..SSIM_WINDOW {
                    let k = win[y * SSIM_WINDOW + x];
                    let i = (y0 + y) * w + x0 + x;
                    ma += k * a[i];
                    mb += k * b[i];
                    saa += k * a[i] * a[i];
                    sbb += k * b[i] * b[i];
                    sab += k * a[i] * b[i];
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
