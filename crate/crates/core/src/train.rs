//! Training loop, configuration files and loss logs.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autograd::{Graph, Var};
use crate::cloud::{synth, ShapePair};
use crate::deformer::DeformerMode;
use crate::error::{Error, Result};
use crate::indicator::{DeSmoothConfig, Normalizer};
use crate::losses::{loss_chamfer, loss_rec, loss_supervised, loss_total, regularizer, LossWeights, ManifoldNeighbors};
use crate::model::{ArchConfig, CorrNet3D};
use crate::params::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Reconstruction plus permutation and manifold regularizers.
    Unsupervised,
    /// Squared distance between `P` and the ground truth; the deformer is unused.
    Supervised,
    /// Chamfer reconstruction plus the regularizers.
    Chamfer,
    /// Reconstruction alone.
    RecOnly,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Unsupervised => "unsupervised",
            TrainMode::Supervised => "supervised",
            TrainMode::Chamfer => "chamfer",
            TrainMode::RecOnly => "rec-only",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "unsupervised" => TrainMode::Unsupervised,
            "supervised" => TrainMode::Supervised,
            "chamfer" => TrainMode::Chamfer,
            "rec-only" => TrainMode::RecOnly,
            _ => return Err(Error::Config(format!("unknown mode {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub arch: ArchConfig,
    pub normalizer: Normalizer,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Unsupervised,
            epochs: 50,
            batch_size: 10,
            lr: AdamConfig::default().lr,
            seed: 0,
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
            normalizer: Normalizer::DeSmooth(DeSmoothConfig::default()),
            checkpoint_every: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid value {value:?} for {key}")))
}

fn deformer_name(mode: DeformerMode) -> &'static str {
    match mode {
        DeformerMode::PointwiseMlp => "pointwise",
        DeformerMode::NoGlobal => "no-global",
        DeformerMode::FullyConnected => "fully-connected",
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.weights.validate()?;
        self.arch.validate()?;
        match &self.normalizer {
            Normalizer::DeSmooth(c) => c.validate(),
            Normalizer::Sinkhorn { iterations: 0 } => Err(Error::Config("sinkhorn needs at least one iteration".into())),
            Normalizer::Sinkhorn { .. } => Ok(()),
        }
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut desmooth = DeSmoothConfig::default();
        let mut sinkhorn_iterations = 30;
        let mut use_sinkhorn = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "mode" => cfg.mode = value.parse().map_err(|e: Error| Error::parse(line_no, e.to_string()))?,
                "epochs" => cfg.epochs = parse_value(key, value, line_no)?,
                "batch_size" => cfg.batch_size = parse_value(key, value, line_no)?,
                "lr" => cfg.lr = parse_value(key, value, line_no)?,
                "seed" => cfg.seed = parse_value(key, value, line_no)?,
                "lambda_perm" => cfg.weights.lambda_perm = parse_value(key, value, line_no)?,
                "lambda_mfd" => cfg.weights.lambda_mfd = parse_value(key, value, line_no)?,
                "k_mfd" => cfg.weights.k_mfd = parse_value(key, value, line_no)?,
                "widths" => {
                    cfg.arch.widths = value
                        .split(',')
                        .map(|w| parse_value(key, w.trim(), line_no))
                        .collect::<Result<_>>()?
                }
                "k" => cfg.arch.k = parse_value(key, value, line_no)?,
                "hidden" => cfg.arch.hidden = parse_value(key, value, line_no)?,
                "slope" => cfg.arch.slope = parse_value(key, value, line_no)?,
                "shared_deformer" => cfg.arch.shared_deformer = parse_value(key, value, line_no)?,
                "deformer" => {
                    cfg.arch.deformer = match value {
                        "pointwise" => DeformerMode::PointwiseMlp,
                        "no-global" => DeformerMode::NoGlobal,
                        "fully-connected" => DeformerMode::FullyConnected,
                        _ => return Err(Error::parse(line_no, format!("unknown deformer {value:?}"))),
                    }
                }
                "normalizer" => {
                    use_sinkhorn = match value {
                        "desmooth" => false,
                        "sinkhorn" => true,
                        _ => return Err(Error::parse(line_no, format!("unknown normalizer {value:?}"))),
                    }
                }
                "sinkhorn_iterations" => sinkhorn_iterations = parse_value(key, value, line_no)?,
                "t" => desmooth.t = parse_value(key, value, line_no)?,
                "tau" => desmooth.tau = parse_value(key, value, line_no)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_value(key, value, line_no)?,
                _ => return Err(Error::parse(line_no, format!("unknown key {key:?}"))),
            }
        }
        cfg.normalizer = if use_sinkhorn {
            Normalizer::Sinkhorn {
                iterations: sinkhorn_iterations,
            }
        } else {
            Normalizer::DeSmooth(desmooth)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

impl fmt::Display for TrainConfig {
    /// The config-file form; parses back to an equal value.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.arch.widths.iter().map(|w| w.to_string()).collect();
        writeln!(f, "mode = {}", self.mode.as_str())?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "lambda_perm = {}", self.weights.lambda_perm)?;
        writeln!(f, "lambda_mfd = {}", self.weights.lambda_mfd)?;
        writeln!(f, "k_mfd = {}", self.weights.k_mfd)?;
        writeln!(f, "widths = {}", widths.join(","))?;
        writeln!(f, "k = {}", self.arch.k)?;
        writeln!(f, "hidden = {}", self.arch.hidden)?;
        writeln!(f, "slope = {}", self.arch.slope)?;
        writeln!(f, "shared_deformer = {}", self.arch.shared_deformer)?;
        writeln!(f, "deformer = {}", deformer_name(self.arch.deformer))?;
        match &self.normalizer {
            Normalizer::DeSmooth(c) => {
                writeln!(f, "normalizer = desmooth")?;
                writeln!(f, "t = {}", c.t)?;
                writeln!(f, "tau = {}", c.tau)?;
            }
            Normalizer::Sinkhorn { iterations } => {
                writeln!(f, "normalizer = sinkhorn")?;
                writeln!(f, "sinkhorn_iterations = {iterations}")?;
            }
        }
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)
    }
}

/// Mean per-pair training loss of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

/// CSV with header `epoch,loss`; floats use the shortest exact representation.
pub fn loss_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss\n");
    for r in log {
        let _ = writeln!(out, "{},{}", r.epoch, r.loss);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CorrNet3D,
    pub log: Vec<EpochRecord>,
}

/// Per-pair data prepared once: normalized clouds and coordinate neighbourhoods.
struct Prepared {
    a: crate::autograd::Tensor,
    b: crate::autograd::Tensor,
    gt: Option<Vec<usize>>,
    nbrs: Option<ManifoldNeighbors>,
}

fn prepare(pairs: &[ShapePair], cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let n = pairs.first().map(ShapePair::len).ok_or_else(|| Error::Contract("no training pairs".into()))?;
    let needs_nbrs = matches!(cfg.mode, TrainMode::Unsupervised | TrainMode::Chamfer);
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.len() != n {
                return Err(Error::Contract(format!("pair {i} has {} points, expected {n}", p.len())));
            }
            if n <= cfg.arch.k {
                return Err(Error::Contract(format!("pairs need more than k={} points, got {n}", cfg.arch.k)));
            }
            if cfg.mode == TrainMode::Supervised && p.ground_truth.is_none() {
                return Err(Error::Config(format!("supervised training needs ground truth; pair {i} has none")));
            }
            let p = p.normalized()?;
            let (a, b) = (p.source.to_tensor(), p.target.to_tensor());
            let nbrs = if needs_nbrs {
                Some(ManifoldNeighbors::from_clouds(&a, &b, cfg.weights.k_mfd)?)
            } else {
                None
            };
            Ok(Prepared {
                a,
                b,
                gt: p.ground_truth,
                nbrs,
            })
        })
        .collect()
}

/// Builds the scalar training loss of one pair according to `cfg.mode`.
fn pair_loss(model: &CorrNet3D, g: &mut Graph, bound: &crate::params::Bound, item: &Prepared, cfg: &TrainConfig) -> Result<Var> {
    let a = g.constant(item.a.clone());
    let b = g.constant(item.b.clone());
    let out = model.correspond(g, bound, a, b)?;
    match cfg.mode {
        TrainMode::Supervised => loss_supervised(g, out.corr, item.gt.as_deref().expect("checked in prepare")),
        TrainMode::RecOnly => {
            let (ar, br) = model.reconstruct(g, bound, a, b, &out)?;
            loss_rec(g, a, ar, b, br)
        }
        TrainMode::Unsupervised => {
            let (ar, br) = model.reconstruct(g, bound, a, b, &out)?;
            let nbrs = item.nbrs.as_ref().expect("prepared");
            Ok(loss_total(g, a, b, ar, br, out.corr, &cfg.weights, nbrs)?.total)
        }
        TrainMode::Chamfer => {
            let (ar, br) = model.reconstruct(g, bound, a, b, &out)?;
            let ca = loss_chamfer(g, a, ar)?;
            let cb = loss_chamfer(g, b, br)?;
            let cd = g.add(ca, cb)?;
            let nbrs = item.nbrs.as_ref().expect("prepared");
            let (reg, _, _) = regularizer(g, out.corr, a, b, &cfg.weights, nbrs)?;
            g.add(cd, reg)
        }
    }
}

fn numeric_failure(model: &CorrNet3D, epoch: usize, pair: usize, loss: f64) -> Error {
    let mut worst = String::new();
    for id in model.params.ids() {
        let t = model.params.get(id);
        if t.has_non_finite() || model.params.grad(id).iter().any(|g| !g.is_finite()) {
            let _ = write!(worst, " {}", model.params.name(id));
        }
    }
    if worst.is_empty() {
        worst.push_str(" none");
    }
    Error::Numeric(format!(
        "non-finite loss {loss} at epoch {epoch}, pair {pair}, step {}; parameters with non-finite values or gradients:{worst}",
        model.params.step_count()
    ))
}

/// Trains a fresh model. `on_epoch` sees every finished epoch and may stop
/// training by returning an error.
pub fn train_with(
    pairs: &[ShapePair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &CorrNet3D) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = prepare(pairs, cfg)?;
    let mut model = CorrNet3D::new(cfg.arch.clone(), cfg.normalizer, data[0].a.rows(), cfg.seed)?;
    let mut order_rng = synth::rng(cfg.seed ^ 0x5eed_0f_0de5);
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut g = Graph::new();
                let bound = model.params.bind(&mut g);
                let loss = pair_loss(&model, &mut g, &bound, &data[i], cfg)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(numeric_failure(&model, epoch, i, value));
                }
                total += value;
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?;
                model.params.accumulate(&g, &bound);
            }
            model.params.adam_step(&adam)?;
        }
        let record = EpochRecord {
            epoch,
            loss: total / data.len() as f64,
            steps: model.params.step_count(),
        };
        log.push(record);
        on_epoch(&record, &model)?;
    }
    Ok(TrainOutcome { model, log })
}

pub fn train(pairs: &[ShapePair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(pairs, cfg, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::synth::{synth_rigid_pair, RigidParams, ShapeTemplate};

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            arch: ArchConfig {
                widths: vec![8, 8, 12],
                k: 4,
                hidden: 16,
                ..ArchConfig::default()
            },
            weights: LossWeights {
                k_mfd: 4,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        }
    }

    fn pairs(count: usize, n: usize) -> Vec<ShapePair> {
        (0..count as u64)
            .map(|s| {
                let base = ShapeTemplate::random(s).sample(n, s + 100).unwrap();
                synth_rigid_pair(&base, RigidParams::default(), s + 200).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::Chamfer;
        cfg.arch.widths = vec![16, 32];
        cfg.arch.deformer = DeformerMode::NoGlobal;
        cfg.lr = 3e-4;
        assert_eq!(TrainConfig::parse(&cfg.to_string()).unwrap(), cfg);
        let sk = TrainConfig {
            normalizer: Normalizer::Sinkhorn { iterations: 7 },
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&sk.to_string()).unwrap(), sk);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(matches!(TrainConfig::parse("epochs = 3\nfoo = 1"), Err(Error::Parse { line: 2, .. })));
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("epochs 3").is_err());
        let cfg = TrainConfig::parse("# comment\n\nepochs = 3  # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn smoke_every_mode_is_finite() {
        let data = pairs(3, 16);
        for mode in [TrainMode::Unsupervised, TrainMode::Supervised, TrainMode::Chamfer, TrainMode::RecOnly] {
            let out = train(&data, &tiny_cfg(mode)).unwrap();
            assert_eq!(out.log.len(), 2);
            assert!(out.log.iter().all(|r| r.loss.is_finite()), "{mode:?}");
            assert_eq!(out.log[1].steps, 4);
        }
    }

    #[test]
    fn rec_only_equals_zero_weight_unsupervised() {
        let data = pairs(3, 16);
        let rec = train(&data, &tiny_cfg(TrainMode::RecOnly)).unwrap();
        let mut cfg = tiny_cfg(TrainMode::Unsupervised);
        cfg.weights.lambda_perm = 0.0;
        cfg.weights.lambda_mfd = 0.0;
        let zero = train(&data, &cfg).unwrap();
        assert_eq!(rec.log, zero.log);
        assert!(rec.model.params.same_values(&zero.model.params));
    }

    #[test]
    fn supervised_requires_ground_truth() {
        let mut data = pairs(1, 16);
        data[0].ground_truth = None;
        assert!(matches!(train(&data, &tiny_cfg(TrainMode::Supervised)), Err(Error::Config(_))));
    }

    #[test]
    fn mixed_sizes_rejected() {
        let mut data = pairs(1, 16);
        data.extend(pairs(1, 17));
        assert!(matches!(train(&data, &tiny_cfg(TrainMode::Unsupervised)), Err(Error::Contract(_))));
    }

    #[test]
    fn epoch_callback_can_stop() {
        let data = pairs(2, 16);
        let mut seen = 0;
        let r = train_with(&data, &tiny_cfg(TrainMode::Unsupervised), |rec, _| {
            seen = rec.epoch;
            Err(Error::Config("stop".into()))
        });
        assert!(r.is_err());
        assert_eq!(seen, 1);
    }

    #[test]
    fn loss_log_format() {
        let log = [EpochRecord {
            epoch: 1,
            loss: 0.5,
            steps: 3,
        }];
        assert_eq!(loss_log_csv(&log), "epoch,loss\n1,0.5\n");
    }
}
