//! Per-layer diagonal Fisher scores and top-K layer selection.
//!
//! `F_ℓ = (1/N) Σ_n Σ_{θ ∈ layer ℓ} ‖∇_θ L(x_n, y_n)‖²`, summed over the five
//! target projections of the layer. Layers with the largest scores receive
//! adapters; the selection is frozen before training starts.

use serde::{Deserialize, Serialize};

use crate::error::{ForaError, Result};
use crate::model::{base_layer_gradients, logits, probabilities, BaseWeights, Batch};
use crate::adapter::AdapterSet;
use crate::rng::{streams, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherVariant {
    /// Gradients of the loss on observed labels.
    Empirical,
    /// Gradients of the loss on labels sampled from the model's own softmax.
    TrueFisher,
}

impl FisherVariant {
    pub fn name(self) -> &'static str {
        match self {
            FisherVariant::Empirical => "empirical",
            FisherVariant::TrueFisher => "true_fisher",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub score: f64,
}

/// How a selection was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionSource {
    Fisher {
        n_batches: usize,
        seed: u64,
        variant: FisherVariant,
    },
    AllLayers,
    Random {
        seed: u64,
    },
    Manual,
}

/// Frozen set of adapted layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSet {
    layers: Vec<usize>,
    n_layers: usize,
    source: SelectionSource,
}

impl SelectionSet {
    pub fn new(mut layers: Vec<usize>, n_layers: usize, source: SelectionSource) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(ForaError::Config(format!(
                "layer {bad} out of range for {n_layers} layers"
            )));
        }
        Ok(Self {
            layers,
            n_layers,
            source,
        })
    }

    pub fn empty(n_layers: usize) -> Self {
        Self {
            layers: Vec::new(),
            n_layers,
            source: SelectionSource::Manual,
        }
    }

    pub fn all(n_layers: usize) -> Self {
        Self {
            layers: (0..n_layers).collect(),
            n_layers,
            source: SelectionSource::AllLayers,
        }
    }

    /// Uniformly random `k`-subset, drawn from its own stream.
    pub fn random(n_layers: usize, k: usize, seed: u64) -> Result<Self> {
        check_k(k, n_layers)?;
        let layers = RngStream::new(seed, streams::RANDOM_SUBSET).subset(n_layers, k);
        Self::new(layers, n_layers, SelectionSource::Random { seed })
    }

    /// Sorted layer indices.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn k(&self) -> usize {
        self.layers.len()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    pub fn source(&self) -> &SelectionSource {
        &self.source
    }
}

fn check_k(k: usize, n_layers: usize) -> Result<()> {
    if k == 0 || k > n_layers {
        return Err(ForaError::KOutOfRange { k, n_layers });
    }
    Ok(())
}

/// Scores together with how they were computed.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherScores {
    pub scores: Vec<LayerScore>,
    pub n_batches: usize,
    pub seed: u64,
    pub variant: FisherVariant,
}

impl FisherScores {
    pub fn select(&self, k: usize) -> Result<SelectionSet> {
        let mut s = select_topk(&self.scores, k)?;
        s.source = SelectionSource::Fisher {
            n_batches: self.n_batches,
            seed: self.seed,
            variant: self.variant,
        };
        Ok(s)
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.score).collect()
    }
}

/// Average per-batch, per-layer squared gradient norms over batches.
pub fn accumulate_scores(per_batch: &[Vec<f64>]) -> Result<Vec<LayerScore>> {
    let first = per_batch.first().ok_or(ForaError::EmptyCalibration)?;
    let mut acc = vec![0.0; first.len()];
    for b in per_batch {
        if b.len() != acc.len() {
            return Err(ForaError::Config("inconsistent layer count across batches".into()));
        }
        for (a, v) in acc.iter_mut().zip(b) {
            *a += v;
        }
    }
    let n = per_batch.len() as f64;
    acc.into_iter()
        .enumerate()
        .map(|(layer, s)| {
            let score = s / n;
            if !score.is_finite() {
                return Err(ForaError::NonFinite("fisher score"));
            }
            Ok(LayerScore { layer, score })
        })
        .collect()
}

/// Score every layer of the base model over the first `n` calibration batches.
pub fn score_layers(
    weights: &BaseWeights,
    calib: &[Batch],
    n: usize,
    variant: FisherVariant,
    seed: u64,
) -> Result<FisherScores> {
    if calib.is_empty() || n == 0 {
        return Err(ForaError::EmptyCalibration);
    }
    if n > calib.len() {
        return Err(ForaError::Config(format!(
            "requested {n} calibration batches but only {} are available",
            calib.len()
        )));
    }
    let mut labels = RngStream::new(seed, streams::FISHER_LABELS);
    let mut per_batch = Vec::with_capacity(n);
    for batch in &calib[..n] {
        let batch = match variant {
            FisherVariant::Empirical => batch.clone(),
            FisherVariant::TrueFisher => {
                let p = probabilities(&logits(weights, &AdapterSet::empty(), batch)?);
                let sampled = (0..p.rows()).map(|i| labels.categorical(p.row(i))).collect();
                batch.with_targets(sampled)?
            }
        };
        let (_, grads) = base_layer_gradients(weights, &batch)?;
        per_batch.push(grads.iter().map(|g| g.squared_norm()).collect());
    }
    Ok(FisherScores {
        scores: accumulate_scores(&per_batch)?,
        n_batches: n,
        seed,
        variant,
    })
}

/// The `k` highest-scoring layers; ties go to the lower layer index.
pub fn select_topk(scores: &[LayerScore], k: usize) -> Result<SelectionSet> {
    let n_layers = scores.len();
    check_k(k, n_layers)?;
    let mut order: Vec<&LayerScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer.cmp(&b.layer)));
    let layers = order[..k].iter().map(|s| s.layer).collect();
    SelectionSet::new(layers, n_layers, SelectionSource::Manual)
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets give 1.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
