//! System-graph performance predictors: a GIN encoder shared by a throughput
//! regression head and a pairwise "which scheme is faster" head.

pub mod checkpoint;
pub mod gin;
pub mod gradcheck;
pub mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sysgraph::{FeatureMatrix, Normalizer, RawFeatures, SystemGraph, FEATURE_DIM};
use crate::types::Scheme;
use gin::{GraphInput, Params};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, GradCheck};
pub use train::{
    pair_accuracy, split_by_system, train_relative, train_throughput, RelativeReport,
    ThroughputReport, TrainOptions,
};

pub const DEFAULT_HIDDEN: usize = 64;
pub const MAX_HIDDEN: usize = 512;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("feature matrix has {got} rows but the graph has {expected} nodes")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("the two feature matrices describe different graphs")]
    TopologyMismatch,
    #[error("hidden width must be in 1..={MAX_HIDDEN}, got {0}")]
    InvalidHidden(usize),
    #[error("need at least {needed} samples, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },
    #[error("no training pairs: every group has a single sample or only ties")]
    NoPairs,
    #[error("invalid sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Normalizer(#[from] crate::sysgraph::NormalizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a sample came from, enough to regenerate and re-simulate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub config_seed: u64,
    pub scheme: Scheme,
}

/// One measured (system, scheme) point.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Samples sharing a key were measured on the same system.
    pub system_key: u64,
    pub graph: SystemGraph,
    pub raw: RawFeatures,
    /// Inferences per second.
    pub throughput: f64,
    pub origin: Option<SampleOrigin>,
}

/// Two samples of one system; `a_faster` is the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub a_faster: bool,
}

/// All unordered pairs within each system group, in sample order, with the
/// earlier sample as `a`. Pairs with equal throughput are dropped.
pub fn make_pairs(samples: &[Sample]) -> Vec<PairSample> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let g = groups.entry(s.system_key).or_default();
        if g.is_empty() {
            order.push(s.system_key);
        }
        g.push(i);
    }
    let mut pairs = Vec::new();
    for key in order {
        let g = &groups[&key];
        for (x, &a) in g.iter().enumerate() {
            for &b in &g[x + 1..] {
                let (ta, tb) = (samples[a].throughput, samples[b].throughput);
                if ta == tb || samples[a].graph != samples[b].graph {
                    continue;
                }
                pairs.push(PairSample { a, b, a_faster: ta > tb });
            }
        }
    }
    pairs
}

/// Which heads have been fitted. Predictions from an unfitted head are
/// allowed; callers can check here.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub throughput_trained: bool,
    pub relative_trained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub params: Params,
    pub normalizer: Normalizer,
    pub meta: ModelMeta,
}

impl PredictorModel {
    pub fn new(hidden: usize, seed: u64, normalizer: Normalizer) -> Result<Self, PredictorError> {
        check_hidden(hidden)?;
        Ok(Self {
            params: Params::random(FEATURE_DIM, hidden, seed),
            normalizer,
            meta: ModelMeta::default(),
        })
    }

    pub fn zeros(hidden: usize, normalizer: Normalizer) -> Result<Self, PredictorError> {
        check_hidden(hidden)?;
        Ok(Self {
            params: Params::zeros(FEATURE_DIM, hidden),
            normalizer,
            meta: ModelMeta::default(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.params.hidden
    }

    pub fn features(&self, raw: &RawFeatures) -> FeatureMatrix {
        raw.normalize(&self.normalizer)
    }

    pub fn encode(&self, graph: &SystemGraph, features: &FeatureMatrix) -> Result<Vec<f64>, PredictorError> {
        Ok(gin::forward(&self.params, &prepare(graph, features)?).embedding)
    }

    pub fn predict_throughput(
        &self,
        graph: &SystemGraph,
        features: &FeatureMatrix,
    ) -> Result<f64, PredictorError> {
        let e = self.encode(graph, features)?;
        Ok(gin::softplus(gin::throughput_logit(&self.params, &e)))
    }

    /// Scheme score used by the pairwise head; higher means faster.
    pub fn score(&self, graph: &SystemGraph, features: &FeatureMatrix) -> Result<f64, PredictorError> {
        let e = self.encode(graph, features)?;
        Ok(gin::relative_score(&self.params, &e))
    }

    /// Probability that the scheme behind `a` outperforms the one behind `b`.
    pub fn predict_relative(
        &self,
        graph: &SystemGraph,
        a: &FeatureMatrix,
        b: &FeatureMatrix,
    ) -> Result<f64, PredictorError> {
        if a.node_count() != b.node_count()
            || a.rows().iter().zip(b.rows()).any(|(x, y)| x[..FEATURE_DIM - 1] != y[..FEATURE_DIM - 1])
        {
            return Err(PredictorError::TopologyMismatch);
        }
        let sa = self.score(graph, a)?;
        let sb = self.score(graph, b)?;
        Ok(gin::pair_probability(sa, sb))
    }
}

fn check_hidden(hidden: usize) -> Result<(), PredictorError> {
    if hidden == 0 || hidden > MAX_HIDDEN {
        return Err(PredictorError::InvalidHidden(hidden));
    }
    Ok(())
}

pub(crate) fn prepare(graph: &SystemGraph, features: &FeatureMatrix) -> Result<GraphInput, PredictorError> {
    if features.node_count() != graph.node_count() {
        return Err(PredictorError::DimensionMismatch {
            expected: graph.node_count(),
            got: features.node_count(),
        });
    }
    Ok(GraphInput::new(graph.in_neighbors(), features.rows()))
}

#[cfg(test)]
mod tests;
