//! The full network: embedding, correspondence indicator and deformer wired
//! around one shared parameter store.

use crate::autograd::{Graph, Tensor, Var};
use crate::cloud::PointCloud;
use crate::deformer::{reconstruct_both, DeformerMode, DeformerParams};
use crate::embedding::{Embedding, FeatureSet};
use crate::error::{Error, Result};
use crate::indicator::{normalize, similarity, CorrMatrix, DeSmoothConfig, Normalizer};
use crate::params::{Bound, ModelParams};

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Output width of each EdgeConv layer; the last one is the feature width `d`.
    pub widths: Vec<usize>,
    /// Feature-space neighbours per EdgeConv layer.
    pub k: usize,
    /// Deformer hidden width.
    pub hidden: usize,
    pub slope: f64,
    pub shared_deformer: bool,
    pub deformer: DeformerMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: vec![64, 64, 96],
            k: 10,
            hidden: 128,
            slope: 0.2,
            shared_deformer: true,
            deformer: DeformerMode::PointwiseMlp,
        }
    }
}

impl ArchConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("embedding widths must be non-empty and positive".into()));
        }
        if self.k == 0 || self.hidden == 0 {
            return Err(Error::Config("k and hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one forward pass over a pair produces.
#[derive(Clone, Copy, Debug)]
pub struct PairOutput {
    pub features_a: FeatureSet,
    pub features_b: FeatureSet,
    pub corr: Var,
}

#[derive(Clone, Debug)]
pub struct CorrNet3D {
    pub params: ModelParams,
    pub embedding: Embedding,
    pub deformer: DeformerParams,
    pub arch: ArchConfig,
    pub normalizer: Normalizer,
}

impl CorrNet3D {
    /// `points` only matters for the fully connected deformer, whose size depends on it.
    pub fn new(arch: ArchConfig, normalizer: Normalizer, points: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if let Normalizer::DeSmooth(cfg) = &normalizer {
            cfg.validate()?;
        }
        let mut rng = crate::cloud::synth::rng(seed);
        let mut params = ModelParams::new();
        let embedding = Embedding::register(&mut params, &arch.widths, arch.k, arch.slope, &mut rng)?;
        let deformer = DeformerParams::register(
            &mut params,
            arch.feature_dim(),
            arch.hidden,
            arch.deformer,
            arch.shared_deformer,
            points,
            arch.slope,
            &mut rng,
        )?;
        Ok(CorrNet3D {
            params,
            embedding,
            deformer,
            arch,
            normalizer,
        })
    }

    pub fn with_defaults(seed: u64) -> Result<Self> {
        CorrNet3D::new(ArchConfig::default(), Normalizer::DeSmooth(DeSmoothConfig::default()), 0, seed)
    }

    /// Rebuilds a model around stored parameters. Layer widths, the deformer
    /// hidden width, sharing and the fully connected variant are read from the
    /// stored shapes; `k`, the slope and the no-global switch come from `base`.
    pub fn from_params(stored: &ModelParams, base: ArchConfig, normalizer: Normalizer) -> Result<Self> {
        let shape = |name: &str| {
            stored
                .by_name(name)
                .map(|t| t.dims2())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))
        };
        let mut widths = Vec::new();
        while let Some(t) = stored.by_name(&format!("embed.layer{}.weight", widths.len() + 1)) {
            widths.push(t.cols());
        }
        if widths.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no embedding layers".into()));
        }
        let shared = stored.by_name("deformer.fc1.weight").is_some();
        let prefix = if shared { "deformer" } else { "deformer.to_a" };
        let (fc1_in, hidden) = shape(&format!("{prefix}.fc1.weight"))?;
        let (_, out) = shape(&format!("{prefix}.fc3.weight"))?;
        let d = *widths.last().expect("non-empty");
        let (deformer, points) = if out == 3 && fc1_in == 3 + d {
            let mode = match base.deformer {
                DeformerMode::FullyConnected => DeformerMode::PointwiseMlp,
                m => m,
            };
            (mode, 0)
        } else if out % 3 == 0 && fc1_in == out + d {
            (DeformerMode::FullyConnected, out / 3)
        } else {
            return Err(Error::Checkpoint(format!("deformer shapes {fc1_in} -> {out} match no known layout")));
        };
        let arch = ArchConfig {
            widths,
            hidden,
            shared_deformer: shared,
            deformer,
            ..base
        };
        let mut model = CorrNet3D::new(arch, normalizer, points, 0)?;
        model.params.load_values_from(stored)?;
        Ok(model)
    }

    pub fn load(path: &std::path::Path, base: ArchConfig, normalizer: Normalizer) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        CorrNet3D::from_params(&ModelParams::from_checkpoint_bytes(&bytes)?, base, normalizer)
    }

    /// Embeds both clouds and builds the soft correspondence.
    pub fn correspond(&self, g: &mut Graph, bound: &Bound, a: Var, b: Var) -> Result<PairOutput> {
        let (na, nb) = (g.value(a).rows(), g.value(b).rows());
        if na != nb {
            return Err(Error::Contract(format!("clouds differ in size: {na} vs {nb}")));
        }
        if na <= self.arch.k {
            return Err(Error::Contract(format!("clouds need more than k={} points, got {na}", self.arch.k)));
        }
        let features_a = self.embedding.forward(g, bound, a)?;
        let features_b = self.embedding.forward(g, bound, b)?;
        let s = similarity(g, features_a.pointwise, features_b.pointwise)?;
        let corr = normalize(g, s, &self.normalizer)?;
        Ok(PairOutput {
            features_a,
            features_b,
            corr,
        })
    }

    /// `(A~, B~)` for an already computed forward pass.
    pub fn reconstruct(&self, g: &mut Graph, bound: &Bound, a: Var, b: Var, out: &PairOutput) -> Result<(Var, Var)> {
        reconstruct_both(
            g,
            bound,
            a,
            b,
            out.corr,
            out.features_a.global,
            out.features_b.global,
            &self.deformer,
        )
    }

    /// Soft correspondence on already normalized clouds.
    pub fn soft_correspondence(&self, source: &Tensor, target: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let a = g.constant(source.clone());
        let b = g.constant(target.clone());
        let out = self.correspond(&mut g, &bound, a, b)?;
        Ok(g.value(out.corr).detached())
    }

    /// Normalizes both clouds, then returns the soft and quantized correspondence.
    pub fn predict(&self, source: &PointCloud, target: &PointCloud) -> Result<CorrMatrix> {
        let a = source.normalize_unit()?.to_tensor();
        let b = target.normalize_unit()?.to_tensor();
        Ok(CorrMatrix::new(self.soft_correspondence(&a, &b)?).quantized())
    }
}
