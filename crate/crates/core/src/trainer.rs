//! Joint training over all identities, snapshots and evaluation.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointError, OptimizerState};
use crate::config::{substream, Config, Precision};
use crate::diffcore::{adam_step, AdamHyper, AdamState, Tensor, TensorError};
use crate::losses::{psnr, ssim, total_loss, LossConfig};
use crate::model::{Model, ModelError};
use crate::params::Group;
use crate::renderer::{patch_pixels, render_image, render_rays, Image, RenderError, Sampling};
use crate::synthdata::{DataError, Dataset, FrameEntry, Split};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: non-finite loss")]
    NonFiniteLoss { iteration: usize },
    #[error("training diverged at iteration {iteration}: non-finite gradient in `{tensor}`")]
    NonFiniteGradient { iteration: usize, tensor: String },
    #[error("dataset has no training frames")]
    NoTrainingFrames,
    #[error("dataset has {dataset} identities but the model has {model}")]
    IdentityCount { dataset: usize, model: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pixel rectangle `[u0, u1) × [v0, v1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub u0: usize,
    pub v0: usize,
    pub u1: usize,
    pub v1: usize,
}

/// Bounding rectangle of a mask grown by `dilation`, clipped to the image;
/// the whole image when the mask is empty.
pub fn mask_rect(mask: &Image, dilation: usize) -> Rect {
    let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
    for v in 0..mask.height {
        for u in 0..mask.width {
            if mask.pixel(u, v)[0] > 0.5 {
                u0 = u0.min(u);
                v0 = v0.min(v);
                u1 = u1.max(u + 1);
                v1 = v1.max(v + 1);
            }
        }
    }
    if u0 == usize::MAX {
        return Rect { u0: 0, v0: 0, u1: mask.width, v1: mask.height };
    }
    Rect {
        u0: u0.saturating_sub(dilation),
        v0: v0.saturating_sub(dilation),
        u1: (u1 + dilation).min(mask.width),
        v1: (v1 + dilation).min(mask.height),
    }
}

/// Top-left corner of a `size` patch centered at a uniform point of `rect`,
/// shifted to lie inside a `width × height` image.
pub fn sample_patch(rect: Rect, size: usize, width: usize, height: usize, rng: &mut impl Rng) -> (usize, usize) {
    let cu = rng.random_range(rect.u0..rect.u1);
    let cv = rng.random_range(rect.v0..rect.v1);
    let u0 = cu.saturating_sub(size / 2).min(width - size);
    let v0 = cv.saturating_sub(size / 2).min(height - size);
    (u0, v0)
}

/// Training frames with their images and patch rectangles in memory.
pub struct TrainingSet {
    pub entries: Vec<FrameEntry>,
    pub images: Vec<Image>,
    pub rects: Vec<Rect>,
}

impl TrainingSet {
    pub fn load(data: &Dataset, dilation: usize) -> Result<Self, TrainError> {
        let entries: Vec<FrameEntry> = data.split(Split::Train).cloned().collect();
        if entries.is_empty() {
            return Err(TrainError::NoTrainingFrames);
        }
        let mut images = Vec::with_capacity(entries.len());
        let mut rects = Vec::with_capacity(entries.len());
        for e in &entries {
            images.push(data.load_image(e)?);
            rects.push(mask_rect(&data.load_mask(e)?, dilation));
        }
        Ok(Self { entries, images, rects })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub iteration: usize,
    pub identity: usize,
    pub total: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub seconds: f64,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub iteration: usize,
    data: &'a Dataset,
    set: TrainingSet,
    hyper: AdamHyper,
    loss: LossConfig,
}

impl<'a> Trainer<'a> {
    /// Fresh model initialized from the config seed.
    pub fn new(config: &Config, data: &'a Dataset) -> Result<Self, TrainError> {
        let model = Model::new(config, data.topologies(), &mut substream(config.seed, "model"))?;
        Self::from_model(model, None, 0, data)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, data: &'a Dataset) -> Result<Self, TrainError> {
        let model = ckpt.to_model()?;
        Self::from_model(model, ckpt.optimizer.clone(), ckpt.iteration as usize, data)
    }

    pub fn from_model(
        mut model: Model,
        optimizer: Option<OptimizerState>,
        iteration: usize,
        data: &'a Dataset,
    ) -> Result<Self, TrainError> {
        if data.identities.len() != model.identities() {
            return Err(TrainError::IdentityCount {
                dataset: data.identities.len(),
                model: model.identities(),
            });
        }
        let cfg = model.config.clone();
        if cfg.train.precision == Precision::Single {
            model.store.round_to_f32();
        }
        let optimizer =
            optimizer.unwrap_or_else(|| model.store.iter().map(|(_, p)| AdamState::new(&[p.value.len()])).collect());
        Ok(Self {
            model,
            optimizer,
            iteration,
            data,
            set: TrainingSet::load(data, cfg.train.mask_dilation)?,
            hyper: AdamHyper {
                betas: (cfg.train.betas[0], cfg.train.betas[1]),
                eps: cfg.train.adam_eps,
            },
            loss: LossConfig::from(&cfg.train),
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    /// One optimization step on a uniformly drawn training frame.
    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        let start = Instant::now();
        let cfg = self.model.config.clone();
        let t = &cfg.train;
        let mut rng = substream(cfg.seed ^ self.iteration as u64, "step");
        let f = rng.random_range(0..self.set.entries.len());
        let entry = &self.set.entries[f];
        let image = &self.set.images[f];
        let pose = self.data.pose(entry);
        let mut pixels = Vec::with_capacity(t.patches_per_iter * t.patch_size * t.patch_size);
        for _ in 0..t.patches_per_iter {
            let corner = sample_patch(self.set.rects[f], t.patch_size, image.width, image.height, &mut rng);
            pixels.extend(patch_pixels(corner.0, corner.1, t.patch_size));
        }
        let progress = self.iteration as f64 / t.iterations as f64;
        let mut pass = render_rays(&self.model, entry.identity, &pose, &pixels, Sampling::Stratified(&mut rng), progress)?;
        let g = &mut pass.graph;
        let n = t.patch_size * t.patch_size;
        let mut patches = Vec::with_capacity(t.patches_per_iter);
        for p in 0..t.patches_per_iter {
            let pred = g.narrow(pass.color, 0, p * n, n)?;
            let gt: Vec<f64> = pixels[p * n..(p + 1) * n].iter().flat_map(|&(u, v)| image.pixel(u, v).to_vec()).collect();
            let gt = g.constant(Tensor::new(&[n, 3], gt)?);
            patches.push((pred, gt));
        }
        let terms = total_loss(g, &patches, t.patch_size, &self.loss)?;
        let total = g.value(terms.total).item();
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: self.iteration });
        }
        g.backward(terms.total)?;
        let log = StepLog {
            iteration: self.iteration,
            identity: entry.identity,
            total,
            l2: g.value(terms.l2).item(),
            perceptual: terms.perceptual.map_or(0.0, |p| g.value(p).item()),
            seconds: 0.0,
        };

        for (i, (name, param)) in self.model.store.iter_mut().enumerate() {
            let Some(var) = pass.binder.get(name) else { continue };
            let grad = g.grad(var);
            if !grad.all_finite() {
                return Err(TrainError::NonFiniteGradient {
                    iteration: self.iteration,
                    tensor: name.clone(),
                });
            }
            let lr = match param.group {
                Group::Fast => t.lr_fast,
                Group::Slow => t.lr_slow,
            };
            adam_step(&mut [param.value.data_mut()], &[grad.data()], &[lr], &mut self.optimizer[i], self.hyper)?;
        }
        if t.precision == Precision::Single {
            self.model.store.round_to_f32();
        }
        self.iteration += 1;
        Ok(StepLog {
            seconds: start.elapsed().as_secs_f64(),
            ..log
        })
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.iteration as u64, with_optimizer.then_some(&self.optimizer))
    }
}

/// Outcome of a completed run.
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub logs: Vec<StepLog>,
}

/// Runs until `config.train.iterations`, writing `train.log`,
/// `metrics.jsonl`, snapshots and `final.ckpt` into `out_dir`.
pub fn train(
    trainer: &mut Trainer<'_>,
    out_dir: &Path,
    mut echo: impl FnMut(&str),
) -> Result<TrainSummary, TrainError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join("train.log");
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = File::options().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
    let mut metrics = File::options().create(true).append(true).open(&metrics_path).map_err(io_err(&metrics_path))?;
    let t = trainer.config().train.clone();
    let start = Instant::now();
    let mut logs = Vec::new();
    let mut window = Vec::new();
    while trainer.iteration < t.iterations {
        let step = trainer.step()?;
        window.push(step);
        logs.push(step);
        let done = trainer.iteration;
        if done % t.log_every == 0 || done == t.iterations {
            let k = window.len() as f64;
            let mean = |f: fn(&StepLog) -> f64| window.iter().map(f).sum::<f64>() / k;
            let line = format!(
                "iter {done:>7}  loss {:.5}  l2 {:.5}  perceptual {:.5}  elapsed {:.1}s",
                mean(|s| s.total),
                mean(|s| s.l2),
                mean(|s| s.perceptual),
                start.elapsed().as_secs_f64()
            );
            echo(&line);
            writeln!(log, "{line}").map_err(io_err(&log_path))?;
            window.clear();
        }
        let json = serde_json::to_string(&step).expect("step log serializes");
        writeln!(metrics, "{json}").map_err(io_err(&metrics_path))?;
        if done % t.snapshot_every == 0 && done != t.iterations {
            trainer.checkpoint(true).save(&out_dir.join(format!("snapshot_{done:07}.ckpt")))?;
        }
    }
    let final_checkpoint = out_dir.join("final.ckpt");
    trainer.checkpoint(true).save(&final_checkpoint)?;
    Ok(TrainSummary { final_checkpoint, logs })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub identity: usize,
    pub frame: usize,
    pub camera: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `(identity, mean PSNR, mean SSIM)`.
    pub per_identity: Vec<(usize, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, identities: usize) -> Self {
        let per_identity = (0..identities)
            .map(|i| {
                let r: Vec<&EvalRow> = rows.iter().filter(|r| r.identity == i).collect();
                let k = r.len().max(1) as f64;
                (i, r.iter().map(|r| r.psnr).sum::<f64>() / k, r.iter().map(|r| r.ssim).sum::<f64>() / k)
            })
            .collect();
        let k = rows.len().max(1) as f64;
        Self {
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / k,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / k,
            per_identity,
            rows,
        }
    }

    /// Tab-separated table: one row per image, then per-identity means.
    pub fn to_table(&self) -> String {
        let mut s = String::from("identity\tframe\tcamera\tpsnr\tssim\n");
        for r in &self.rows {
            s += &format!("{}\t{}\t{}\t{:.4}\t{:.5}\n", r.identity, r.frame, r.camera, r.psnr, r.ssim);
        }
        for (i, p, q) in &self.per_identity {
            s += &format!("{i}\tmean\t-\t{p:.4}\t{q:.5}\n");
        }
        s += &format!("all\tmean\t-\t{:.4}\t{:.5}\n", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let table = dir.join("eval.tsv");
        fs::write(&table, self.to_table()).map_err(io_err(&table))?;
        let json = dir.join("eval.json");
        fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes")).map_err(io_err(&json))
    }
}

/// Renders every frame of `split` and compares it with the stored image.
pub fn evaluate(model: &Model, data: &Dataset, split: Split) -> Result<EvalReport, TrainError> {
    let mut rows = Vec::new();
    for entry in data.split(split) {
        let gt = data.load_image(entry)?;
        let (img, _) = render_image(model, entry.identity, &data.pose(entry))?;
        rows.push(EvalRow {
            identity: entry.identity,
            frame: entry.frame,
            camera: entry.camera,
            psnr: psnr(&img.data, &gt.data),
            ssim: ssim(&img, &gt).map_err(|e| TensorError::Invalid(e.to_string()))?,
        });
    }
    Ok(EvalReport::from_rows(rows, data.identities.len()))
}
