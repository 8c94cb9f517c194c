//! Command-line interface. Exit codes: 0 success, 1 usage or input error,
//! 2 training divergence, 3 verification failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::model::Model;
use crate::renderer::render_image;
use crate::synthdata::{export_dataset, load_dataset, parse_poses, Dataset, Split};
use crate::trainer::{evaluate, train, TrainError, Trainer};
use crate::verify::{end_to_end, op_suite, END_TO_END_TOLERANCE, OP_EPS, REQUIRED_TENSORS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 1,
            CliError::Diverged(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "polyhuman", version, about = "Multi-identity articulated radiance fields on synthetic data")]
pub struct Cli {
    /// Print the default configuration and exit.
    #[arg(long)]
    pub print_defaults: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Shared code: identity codes and the pose-conditioned code both off.
    NoIdCodes,
    /// Identity codes kept, pose-conditioned path off.
    NoPoseCondition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on all identities of a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a snapshot; its config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Render one identity for a dataset frame or a pose file.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        identity: usize,
        #[arg(long, conflicts_with = "pose_file")]
        frame: Option<usize>,
        /// Pose file in the dataset's pose format; its first line is used.
        #[arg(long)]
        pose_file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<PathBuf>,
    },
    /// Render identity A driven by identity B's pose sequence.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        identity: usize,
        #[arg(long)]
        source: usize,
        /// Half-open frame range `start..end`.
        #[arg(long, default_value = "0..10")]
        frames: String,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate PSNR and SSIM on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every op and of the full pipeline.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupts one op's backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Config::load(p).map_err(input),
        None => Ok(Config::default()),
    }
}

fn load_model(ckpt: &Path, data: &Path) -> Result<(Model, Dataset), CliError> {
    let ckpt = Checkpoint::load(ckpt).map_err(input)?;
    let model = ckpt.to_model().map_err(input)?;
    let data = load_dataset(data).map_err(input)?;
    Ok((model, data))
}

fn check_identity(model: &Model, i: usize) -> Result<(), CliError> {
    if i >= model.identities() {
        return Err(CliError::Input(format!(
            "unknown identity {i}; valid range is 0..{}",
            model.identities()
        )));
    }
    Ok(())
}

fn save(img: &crate::renderer::Image, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    }
    img.save_png(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Parses `start..end`.
pub fn parse_range(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("frame range `{s}` is not of the form start..end"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok((a, b))
}

/// Parses `args` and runs the command, writing human-readable output
/// through `out`.
pub fn run<I, T>(args: I, out: &mut dyn FnMut(&str)) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    out(&e.to_string());
                    Ok(())
                }
                _ => Err(CliError::Usage(e.to_string())),
            };
        }
    };
    if cli.print_defaults {
        out(&Config::default().to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no command given; see --help".into()));
    };
    match command {
        Command::Synth { config, out: dir, identities, frames, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = identities {
                cfg.dataset.identities = n;
            }
            if let Some(n) = frames {
                cfg.dataset.frames = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(input)?;
            let data = export_dataset(&cfg, &dir).map_err(input)?;
            out(&format!(
                "wrote {} identities, {} frames each, {} cameras ({} training images, {} held-out) to {}",
                data.identities.len(),
                cfg.dataset.frames,
                data.cameras.len(),
                data.split(Split::Train).count(),
                data.split(Split::Test).count(),
                dir.display()
            ));
            Ok(())
        }
        Command::Train { config, data, out: dir, ablation, iterations, resume, quiet } => {
            let dataset = load_dataset(&data).map_err(input)?;
            let resumed = resume.as_deref().map(Checkpoint::load).transpose().map_err(input)?;
            let mut cfg = match &resumed {
                Some(c) => c.config.clone(),
                None => load_config(config.as_deref())?,
            };
            match ablation {
                Some(Ablation::NoIdCodes) => {
                    cfg.ablation.use_identity_codes = false;
                    cfg.ablation.use_pose_condition = false;
                }
                Some(Ablation::NoPoseCondition) => cfg.ablation.use_pose_condition = false,
                None => {}
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            cfg.validate().map_err(input)?;
            let dir = dir.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let mut trainer = match &resumed {
                Some(c) => {
                    let mut model = c.to_model().map_err(input)?;
                    model.config = cfg.clone();
                    Trainer::from_model(model, c.optimizer.clone(), c.iteration as usize, &dataset)
                }
                None => Trainer::new(&cfg, &dataset),
            }
            .map_err(input)?;
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| CliError::Input(e.to_string()))?;
            let summary = train(&mut trainer, &dir, |line| {
                if !quiet {
                    println!("{line}");
                }
            })
            .map_err(|e| match e {
                TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => CliError::Diverged(e.to_string()),
                other => input(other),
            })?;
            out(&format!("final checkpoint {}", summary.final_checkpoint.display()));
            Ok(())
        }
        Command::Render { ckpt, data, identity, frame, pose_file, camera, out: path, alpha } => {
            let (model, data) = load_model(&ckpt, &data)?;
            check_identity(&model, identity)?;
            let cam = data
                .cameras
                .get(camera)
                .ok_or_else(|| CliError::Input(format!("unknown camera {camera}; valid range is 0..{}", data.cameras.len())))?;
            let record = match (frame, pose_file) {
                (_, Some(p)) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                    let seq = parse_poses(&text, model.joints(), &p).map_err(input)?;
                    seq.into_iter().next().ok_or_else(|| CliError::Input(format!("{}: no poses", p.display())))?
                }
                (f, None) => {
                    let f = f.unwrap_or(0);
                    let seq = &data.poses[identity];
                    seq.get(f)
                        .cloned()
                        .ok_or_else(|| CliError::Input(format!("unknown frame {f}; valid range is 0..{}", seq.len())))?
                }
            };
            let pose = record.with_camera(cam);
            let (img, a) = render_image(&model, identity, &pose).map_err(input)?;
            save(&img, &path)?;
            if let Some(p) = alpha {
                save(&a, &p)?;
            }
            out(&format!("wrote {}", path.display()));
            Ok(())
        }
        Command::Transfer { ckpt, data, identity, source, frames, camera, out: dir } => {
            let (model, data) = load_model(&ckpt, &data)?;
            check_identity(&model, identity)?;
            check_identity(&model, source)?;
            let (start, end) = parse_range(&frames)?;
            let seq = &data.poses[source];
            if end > seq.len() {
                return Err(CliError::Input(format!(
                    "frame range {start}..{end} exceeds the {} frames of identity {source}",
                    seq.len()
                )));
            }
            let cam = data
                .cameras
                .get(camera)
                .ok_or_else(|| CliError::Input(format!("unknown camera {camera}; valid range is 0..{}", data.cameras.len())))?;
            let topology = &data.identities[identity].topology;
            for f in start..end {
                let pose = seq[f].with_camera(cam).retarget(topology, cam.clone());
                let (img, _) = render_image(&model, identity, &pose).map_err(input)?;
                save(&img, &dir.join(format!("{f:03}.png")))?;
            }
            out(&format!("wrote {} frames to {}", end - start, dir.display()));
            Ok(())
        }
        Command::Eval { ckpt, data, split, out: dir } => {
            let (model, data) = load_model(&ckpt, &data)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let report = evaluate(&model, &data, split).map_err(input)?;
            out(&report.to_table());
            out("perceptual column: substitute metric not reported");
            if let Some(dir) = dir {
                report.write(&dir).map_err(input)?;
            }
            Ok(())
        }
        Command::Gradcheck { config, inject_fault } => {
            let cfg = load_config(config.as_deref())?;
            let ops = op_suite(inject_fault.as_deref()).map_err(input)?;
            let mut failures = Vec::new();
            for c in &ops {
                out(&format!(
                    "op {:<28} max rel error {:.3e}  {}",
                    c.name,
                    c.max_rel_error,
                    if c.passed() { "ok" } else { "FAIL" }
                ));
                if !c.passed() {
                    failures.push(format!("op `{}` ({})", c.op, c.name));
                }
            }
            let params = end_to_end(&cfg, OP_EPS).map_err(input)?;
            let worst = params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
            out(&format!(
                "end-to-end: {} coordinates over {} tensors, max rel error {:.3e}",
                params.len(),
                params.iter().map(|p| &p.name).collect::<std::collections::BTreeSet<_>>().len(),
                worst.map_or(0.0, |w| w.rel_error)
            ));
            if let Some(w) = worst.filter(|w| w.rel_error >= END_TO_END_TOLERANCE) {
                failures.push(format!("parameter `{}`[{}]", w.name, w.index));
            }
            for name in REQUIRED_TENSORS {
                if !params.iter().any(|p| p.name == name) {
                    failures.push(format!("tensor `{name}` received no gradient"));
                }
            }
            if failures.is_empty() {
                out("gradcheck passed");
                Ok(())
            } else {
                Err(CliError::Verification(format!("gradcheck failed: {}", failures.join(", "))))
            }
        }
    }
}
