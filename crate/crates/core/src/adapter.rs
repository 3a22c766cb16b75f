//! Low-rank adapter factors `ΔW = s·B·A` attached to selected layers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ForaError, Result};
use crate::fisher::SelectionSet;
use crate::linalg::{matmul, qr_thin, random_gaussian, Matrix};
use crate::model::{BaseWeights, ModelConfig, Module, Slot};
use crate::rng::RngStream;

/// Initialization of the `B` factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BInit {
    /// Orthonormal columns from the QR of a Gaussian matrix.
    #[default]
    Orthonormal,
    /// All zeros (classic LoRA). Not valid for Stiefel-constrained adapters.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub slot: Slot,
    /// `r × d_in`
    pub a: Matrix,
    /// `d_out × r`
    pub b: Matrix,
    pub scaling: f64,
    pub constrained: bool,
}

impl AdapterPair {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Unscaled product `B·A`.
    pub fn product(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("adapter factors validated at construction")
    }

    /// Deployed update `s·B·A`.
    pub fn delta_w(&self) -> Matrix {
        self.product().scale(self.scaling)
    }

    pub fn param_count(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let (d_out, d_in) = config.module_shape(self.slot.module);
        let r = self.rank();
        if self.a.shape() != (r, d_in) || self.b.shape() != (d_out, r) {
            return Err(ForaError::AdapterShape {
                slot: self.slot.to_string(),
                detail: format!(
                    "A is {:?} and B is {:?}, expected ({r}, {d_in}) and ({d_out}, {r})",
                    self.a.shape(),
                    self.b.shape()
                ),
            });
        }
        Ok(())
    }
}

/// Adapters keyed by slot, together with the layer selection they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pairs: BTreeMap<Slot, AdapterPair>,
    selection: Option<SelectionSet>,
}

impl AdapterSet {
    /// No adapters: the pure base model.
    pub fn empty() -> Self {
        Self {
            pairs: BTreeMap::new(),
            selection: None,
        }
    }

    /// Assemble from explicit pairs. Every selected layer must carry all five
    /// modules and no other layer may carry any.
    pub fn from_pairs(selection: SelectionSet, pairs: Vec<AdapterPair>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for p in pairs {
            if !selection.contains(p.slot.layer) {
                return Err(ForaError::AdapterShape {
                    slot: p.slot.to_string(),
                    detail: "layer is not in the selection".into(),
                });
            }
            map.insert(p.slot, p);
        }
        for &layer in selection.layers() {
            for m in Module::ALL {
                if !map.contains_key(&Slot::new(layer, m)) {
                    return Err(ForaError::AdapterShape {
                        slot: Slot::new(layer, m).to_string(),
                        detail: "selected layer is missing this module".into(),
                    });
                }
            }
        }
        Ok(Self {
            pairs: map,
            selection: Some(selection),
        })
    }

    pub fn get(&self, slot: Slot) -> Option<&AdapterPair> {
        self.pairs.get(&slot)
    }

    pub fn get_mut(&mut self, slot: Slot) -> Option<&mut AdapterPair> {
        self.pairs.get_mut(&slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterPair> {
        self.pairs.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut AdapterPair> {
        self.pairs.values_mut()
    }

    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.pairs.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn selection(&self) -> Option<&SelectionSet> {
        self.selection.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.iter().map(AdapterPair::param_count).sum()
    }

    pub fn validate_against(&self, config: &ModelConfig) -> Result<()> {
        for p in self.pairs.values() {
            if p.slot.layer >= config.n_layers {
                return Err(ForaError::AdapterShape {
                    slot: p.slot.to_string(),
                    detail: format!("model has only {} layers", config.n_layers),
                });
            }
            p.check(config)?;
        }
        Ok(())
    }
}

/// Adapter hyperparameters shared by every slot of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub r: usize,
    pub alpha_lora: f64,
    pub constrained: bool,
    #[serde(default)]
    pub b_init: BInit,
}

impl AdapterSpec {
    pub fn scaling(&self) -> f64 {
        self.alpha_lora / self.r as f64
    }
}

/// Create adapters on all five modules of every selected layer.
///
/// `A ~ N(0, 1/r)` entrywise; `B` per `spec.b_init`. Slots are initialized in
/// `(layer, module)` order from a single stream.
pub fn init_adapters(
    config: &ModelConfig,
    selection: &SelectionSet,
    spec: AdapterSpec,
    stream: &mut RngStream,
) -> Result<AdapterSet> {
    config.validate()?;
    if spec.r == 0 {
        return Err(ForaError::Config("adapter rank must be >= 1".into()));
    }
    if spec.constrained && spec.b_init == BInit::Zero {
        return Err(ForaError::Config(
            "a Stiefel-constrained B cannot be initialized to zero".into(),
        ));
    }
    if selection.n_layers() != config.n_layers {
        return Err(ForaError::Config(format!(
            "selection covers {} layers but the model has {}",
            selection.n_layers(),
            config.n_layers
        )));
    }
    let r = spec.r;
    let sigma = 1.0 / (r as f64).sqrt();
    let mut pairs = Vec::new();
    for &layer in selection.layers() {
        for module in Module::ALL {
            let slot = Slot::new(layer, module);
            let (d_out, d_in) = config.module_shape(module);
            if r > d_out.min(d_in) {
                return Err(ForaError::RankTooLarge {
                    r,
                    slot: slot.to_string(),
                    d_out,
                    d_in,
                });
            }
            let a = random_gaussian(r, d_in, sigma, stream);
            let b = match spec.b_init {
                BInit::Orthonormal => qr_thin(&random_gaussian(d_out, r, 1.0, stream))?.q,
                BInit::Zero => Matrix::zeros(d_out, r),
            };
            pairs.push(AdapterPair {
                slot,
                a,
                b,
                scaling: spec.scaling(),
                constrained: spec.constrained,
            });
        }
    }
    AdapterSet::from_pairs(selection.clone(), pairs)
}

/// `Σ_{ℓ ∈ layers} Σ_modules r·(d_in + d_out)`.
pub fn trainable_param_count(config: &ModelConfig, layers: &[usize], r: usize) -> usize {
    let per_layer: usize = Module::ALL
        .iter()
        .map(|&m| {
            let (d_out, d_in) = config.module_shape(m);
            r * (d_in + d_out)
        })
        .sum();
    layers.len() * per_layer
}

/// Fold `s·B·A` into the base projections. Unadapted tensors are copied
/// untouched.
pub fn merge_into_base(weights: &BaseWeights, adapters: &AdapterSet) -> Result<BaseWeights> {
    adapters.validate_against(&weights.config)?;
    let mut merged = weights.clone();
    for p in adapters.iter() {
        let w = merged.layers[p.slot.layer].module_mut(p.slot.module);
        w.add_assign(&p.product(), p.scaling)?;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaseInit;
    use crate::diagnostics::effective_rank;
    use crate::linalg::singular_values;
    use crate::model::{logits, Batch};
    use crate::rng::streams;

    fn spec(constrained: bool) -> AdapterSpec {
        AdapterSpec {
            r: 8,
            alpha_lora: 16.0,
            constrained,
            b_init: BInit::Orthonormal,
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab: 11,
            seq_len: 5,
        }
    }

    #[test]
    fn constrained_init_is_orthonormal_and_deterministic() {
        let cfg = ModelConfig::default();
        let sel = SelectionSet::all(cfg.n_layers);
        let a = init_adapters(&cfg, &sel, spec(true), &mut RngStream::new(1, streams::ADAPTERS)).unwrap();
        let b = init_adapters(&cfg, &sel, spec(true), &mut RngStream::new(1, streams::ADAPTERS)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5 * cfg.n_layers);
        for p in a.iter() {
            assert!(p.b.orthonormality_defect() <= 1e-12);
            assert_eq!(p.scaling, 2.0);
        }
    }

    #[test]
    fn init_delta_norm_matches_monte_carlo() {
        // ‖s·QA‖_F = s·‖A‖_F for orthonormal Q; estimate E‖A‖_F for r×64 with
        // std 1/√8 from independent draws.
        let cfg = ModelConfig::default();
        let sel = SelectionSet::new(vec![0], cfg.n_layers, crate::fisher::SelectionSource::Manual).unwrap();
        let set = init_adapters(&cfg, &sel, spec(true), &mut RngStream::new(2, streams::ADAPTERS)).unwrap();
        let dw = set.get(Slot::new(0, Module::Q)).unwrap().delta_w().frobenius_norm();
        let mut mc = RngStream::new(3, streams::TEST);
        let mean: f64 = (0..1000)
            .map(|_| random_gaussian(8, 64, 1.0 / 8f64.sqrt(), &mut mc).frobenius_norm())
            .sum::<f64>()
            / 1000.0;
        assert!((dw - 2.0 * mean).abs() <= 0.05 * 2.0 * mean, "{dw} vs {}", 2.0 * mean);
    }

    #[test]
    fn rank_too_large_names_slot() {
        let cfg = small();
        let sel = SelectionSet::all(cfg.n_layers);
        let s = AdapterSpec { r: 17, ..spec(false) };
        let err = init_adapters(&cfg, &sel, s, &mut RngStream::new(0, 0)).unwrap_err();
        assert!(err.to_string().contains("layer0.q"), "{err}");
    }

    #[test]
    fn param_count_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(trainable_param_count(&cfg, &[0], 8), 6144);
        assert_eq!(trainable_param_count(&cfg, &(0..8).collect::<Vec<_>>(), 8), 49152);
        assert_eq!(trainable_param_count(&cfg, &[], 8), 0);
        let sel = SelectionSet::all(cfg.n_layers);
        let set = init_adapters(&cfg, &sel, spec(false), &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(set.param_count(), 49152);
    }

    #[test]
    fn zero_a_merge_is_identity_and_forward_unchanged() {
        let cfg = small();
        let w = BaseWeights::random(cfg, 4, BaseInit::default()).unwrap();
        let sel = SelectionSet::all(cfg.n_layers);
        let mut set = init_adapters(&cfg, &sel, spec(false), &mut RngStream::new(5, 0)).unwrap();
        for p in set.iter_mut() {
            p.a = Matrix::zeros(p.a.rows(), p.a.cols());
        }
        assert_eq!(merge_into_base(&w, &set).unwrap(), w);
        let batch = Batch::new(vec![vec![1, 2, 3]], vec![vec![2, 3, 4]]).unwrap();
        let l0 = logits(&w, &AdapterSet::empty(), &batch).unwrap();
        let l1 = logits(&w, &set, &batch).unwrap();
        assert!(l0.max_abs_diff(&l1) <= 1e-14);
        for p in set.iter() {
            assert_eq!(p.delta_w().frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn shape_mismatch_names_slot() {
        let cfg = small();
        let w = BaseWeights::random(cfg, 4, BaseInit::default()).unwrap();
        let sel = SelectionSet::all(cfg.n_layers);
        let mut set = init_adapters(&cfg, &sel, spec(false), &mut RngStream::new(5, 0)).unwrap();
        set.get_mut(Slot::new(1, Module::Up)).unwrap().a = Matrix::zeros(8, 3);
        let batch = Batch::new(vec![vec![1]], vec![vec![2]]).unwrap();
        let err = logits(&w, &set, &batch).unwrap_err();
        assert!(err.to_string().contains("layer1.up"), "{err}");
    }

    #[test]
    fn orthonormal_b_preserves_singular_values_of_a() {
        let mut s = RngStream::new(9, streams::TEST);
        for (d, r) in [(16, 2), (64, 8), (40, 16)] {
            let b = qr_thin(&random_gaussian(d, r, 1.0, &mut s)).unwrap().q;
            let a = random_gaussian(r, 30, 1.0, &mut s);
            let sba = singular_values(&matmul(&b, &a).unwrap());
            let sa = singular_values(&a);
            for i in 0..r {
                assert!((sba.values()[i] - sa.values()[i]).abs() <= 1e-10);
            }
            let e = (effective_rank(&sba).unwrap() - effective_rank(&sa).unwrap()).abs();
            assert!(e <= 1e-8);
            let f = matmul(&b, &a).unwrap().frobenius_norm() - a.frobenius_norm();
            assert!(f.abs() <= 1e-10);
        }
    }
}
