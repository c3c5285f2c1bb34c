//! Command-line front end: `synth`, `train`, `infer`, `eval` and `bench`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure. `CORRNET3D_LOG=quiet|info|debug` sets verbosity.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::cloud::io::{read_cloud, write_cloud};
use crate::cloud::synth::{pair_dataset, PairKind, RigidParams, RotationRange};
use crate::cloud::{validate_bijection, ShapePair};
use crate::error::{Error, Result};
use crate::eval::{
    corr_strict, curve_is_monotone, default_tolerances, pseudo_cluster_correspond, read_correspondence_csv, write_bench_csv,
    write_correspondence_csv, write_curve_csv, CorrReport,
};
use crate::indicator::quantize;
use crate::model::CorrNet3D;
use crate::train::{loss_log_csv, train_with, TrainConfig};

pub const MANIFEST: &str = "manifest.txt";
pub const LOG_ENV: &str = "CORRNET3D_LOG";

#[derive(Parser, Debug)]
#[command(name = "corrnet3d", version, about = "Dense point-cloud correspondence via learned soft permutations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Rigid,
    Nonrigid,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic pairs with ground truth.
    Synth {
        #[arg(long, value_enum, default_value = "rigid")]
        kind: Kind,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Per-axis rotation bound in degrees (rigid pairs).
        #[arg(long, default_value_t = 45.0, conflicts_with = "full_rotation")]
        max_degrees: f64,
        /// Draw rotations uniformly from all of SO(3) instead.
        #[arg(long)]
        full_rotation: bool,
        /// Bend amplitude (non-rigid pairs).
        #[arg(long, default_value_t = 0.15)]
        amplitude: f64,
    },
    /// Train a model on a synthesized (or compatible) data directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict a hard correspondence between two clouds.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Run the network on this many FPS key points and extend by pseudo clustering.
        #[arg(long)]
        keypoints: Option<usize>,
        /// Training config supplying k, slope and the normalizer.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted correspondence against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also check that the ground truth is a bijection and the curve is monotone.
        #[arg(long)]
        validate: bool,
    },
    /// Time DeSmooth against Sinkhorn normalization.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![128, 256, 512, 1024])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        iterations: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verbosity {
    Quiet,
    Info,
    Debug,
}

impl Verbosity {
    pub fn from_env() -> Verbosity {
        match std::env::var(LOG_ENV).as_deref() {
            Ok("quiet") => Verbosity::Quiet,
            Ok("debug") => Verbosity::Debug,
            _ => Verbosity::Info,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 4,
        Error::Config(_) => 2,
        _ => 3,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let verbosity = Verbosity::from_env();
    // evaluation results are the command's output, not a status message
    let is_result = matches!(cli.command, Command::Eval { .. });
    match run(cli.command, verbosity) {
        Ok(report) => {
            if verbosity > Verbosity::Quiet || is_result {
                print!("{report}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one command and returns what it prints on success.
pub fn run(command: Command, verbosity: Verbosity) -> Result<String> {
    match command {
        Command::Synth {
            kind,
            n,
            pairs,
            seed,
            out_dir,
            max_degrees,
            full_rotation,
            amplitude,
        } => {
            let kind = match kind {
                Kind::Rigid => PairKind::Rigid(RigidParams {
                    rotation: if full_rotation {
                        RotationRange::Full
                    } else {
                        RotationRange::PerAxis { max_degrees }
                    },
                    ..RigidParams::default()
                }),
                Kind::Nonrigid => PairKind::NonRigid { amplitude },
            };
            let data = pair_dataset(kind, pairs, n, seed)?;
            write_dataset(&out_dir, &data)?;
            Ok(format!("wrote {} pairs to {}\n", data.len(), out_dir.display()))
        }
        Command::Train { config, data, out, log } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let pairs = read_dataset(&data)?;
            let outcome = train_with(&pairs, &cfg, |rec, model| {
                if verbosity >= Verbosity::Info {
                    eprintln!("epoch {:4}  loss {:.6}  steps {}", rec.epoch, rec.loss, rec.steps);
                }
                if cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0 {
                    let path = epoch_checkpoint_path(&out, rec.epoch);
                    model.params.save_checkpoint(&path)?;
                    if verbosity >= Verbosity::Debug {
                        eprintln!("saved {}", path.display());
                    }
                }
                Ok(())
            })?;
            outcome.model.params.save_checkpoint(&out)?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
            std::fs::write(&log_path, loss_log_csv(&outcome.log)).map_err(|e| Error::io(&log_path, e))?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            Ok(format!("final loss {last:.6}; checkpoint {}\n", out.display()))
        }
        Command::Infer {
            checkpoint,
            source,
            target,
            keypoints,
            config,
            out,
        } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let model = CorrNet3D::load(&checkpoint, cfg.arch, cfg.normalizer)?;
            let a = read_cloud(&source)?;
            let b = read_cloud(&target)?;
            let corr = match keypoints {
                Some(m) => pseudo_cluster_correspond(&a, &b, m, |ka, kb| Ok(quantize(&model.predict(ka, kb)?.soft)))?,
                None => {
                    if a.len() != b.len() {
                        return Err(Error::Contract(format!(
                            "clouds differ in size ({} vs {}); pass --keypoints to match through key points",
                            a.len(),
                            b.len()
                        )));
                    }
                    model.predict(&a, &b)?.hard.expect("predict quantizes")
                }
            };
            write_correspondence_csv(&out, &corr)?;
            Ok(format!("wrote {} correspondences to {}\n", corr.len(), out.display()))
        }
        Command::Eval {
            pred,
            gt,
            target,
            out,
            validate,
        } => {
            let pred = read_correspondence_csv(&pred)?;
            let gt_idx = read_correspondence_csv(&gt)?;
            let target = read_cloud(&target)?;
            if pred.len() != gt_idx.len() || pred.len() != target.len() {
                return Err(Error::Contract(format!(
                    "row counts differ: prediction {}, ground truth {}, target cloud {}",
                    pred.len(),
                    gt_idx.len(),
                    target.len()
                )));
            }
            if validate {
                validate_bijection(&gt_idx, target.len())?;
            }
            let report = CorrReport::new(&pred, &gt_idx, &target, &default_tolerances())?;
            if validate && !curve_is_monotone(&report.curve) {
                return Err(Error::Numeric("tolerance curve is not monotone".into()));
            }
            if let Some(out) = out {
                write_curve_csv(&out, &report.curve)?;
            }
            let mut s = format!("Corr: {:.2}%\n", 100.0 * corr_strict(&pred, &gt_idx)?);
            let _ = writeln!(s, "Corr@20%: {:.2}%", 100.0 * report.at(0.2));
            Ok(s)
        }
        Command::Bench {
            sizes,
            iterations,
            repeats,
            seed,
            out,
        } => {
            let rows = crate::eval::bench_normalizers(&sizes, iterations, repeats, seed)?;
            write_bench_csv(&out, &rows)?;
            let mut s = String::new();
            for r in &rows {
                let _ = writeln!(s, "{:9} n={:5}  {:.6} s", r.method.as_str(), r.n, r.median_seconds);
            }
            Ok(s)
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn epoch_checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    with_suffix(out, &format!(".epoch{epoch:04}"))
}

/// One directory per pair (`source.xyz`, `target.xyz`, `gt.csv`) and a
/// manifest listing the directories.
pub fn write_dataset(dir: &Path, pairs: &[ShapePair]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("pair_{i:04}");
        let sub = dir.join(&name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write_cloud(&sub.join("source.xyz"), &p.source)?;
        write_cloud(&sub.join("target.xyz"), &p.target)?;
        if let Some(gt) = &p.ground_truth {
            write_correspondence_csv(&sub.join("gt.csv"), gt)?;
        }
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads the pairs listed in `dir/manifest.txt`; `gt.csv` is optional per pair.
pub fn read_dataset(dir: &Path) -> Result<Vec<ShapePair>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut pairs = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let sub = dir.join(line);
        let source = read_cloud(&sub.join("source.xyz"))?;
        let target = read_cloud(&sub.join("target.xyz"))?;
        let gt_path = sub.join("gt.csv");
        let gt = if gt_path.exists() {
            Some(read_correspondence_csv(&gt_path)?)
        } else {
            None
        };
        pairs.push(ShapePair::new(source, target, gt)?);
    }
    if pairs.is_empty() {
        return Err(Error::Contract(format!("{} lists no pairs", path.display())));
    }
    Ok(pairs)
}
