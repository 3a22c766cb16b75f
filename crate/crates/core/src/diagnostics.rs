//! Post-training measurements: effective rank of `B·A`, update magnitude,
//! output drift against the base model, and orthogonality drift.

use serde::Serialize;

use crate::adapter::AdapterSet;
use crate::error::{ForaError, Result};
use crate::linalg::{singular_values, Spectrum};
use crate::model::{base_layer_gradients, logits, BaseWeights, Batch, Slot};

/// `exp(H(p))` with `p_i = σ_i / Σσ`, natural log, `0·ln 0 = 0`.
pub fn effective_rank(spectrum: &Spectrum) -> Result<f64> {
    let total: f64 = spectrum.values().iter().sum();
    if total <= 0.0 {
        return Err(ForaError::ZeroSpectrum);
    }
    let h: f64 = spectrum
        .values()
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// Mean over rows of `KL(softmax(p_logits) ‖ softmax(q_logits))`.
pub fn mean_row_kl(p_logits: &crate::linalg::Matrix, q_logits: &crate::linalg::Matrix) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(ForaError::ShapeMismatch {
            op: "kl",
            lhs: p_logits.shape(),
            rhs: q_logits.shape(),
        });
    }
    let log_softmax = |row: &[f64]| -> Vec<f64> {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter().map(|v| v - lse).collect()
    };
    let mut total = 0.0;
    for i in 0..p_logits.rows() {
        let lp = log_softmax(p_logits.row(i));
        let lq = log_softmax(q_logits.row(i));
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl.max(0.0);
    }
    Ok(total / p_logits.rows().max(1) as f64)
}

/// `KL(p_trained ‖ p_base)` averaged over every position of `eval`.
pub fn kl_output_drift(base: &BaseWeights, trained: &BaseWeights, eval: &[Batch]) -> Result<f64> {
    kl_drift_with(base, trained, &AdapterSet::empty(), eval)
}

/// Same as [`kl_output_drift`] for an unmerged adapter set.
pub fn kl_adapter_drift(base: &BaseWeights, adapters: &AdapterSet, eval: &[Batch]) -> Result<f64> {
    kl_drift_with(base, base, adapters, eval)
}

fn kl_drift_with(base: &BaseWeights, trained: &BaseWeights, adapters: &AdapterSet, eval: &[Batch]) -> Result<f64> {
    if base.config != trained.config {
        return Err(ForaError::Config("KL drift needs two models with one config".into()));
    }
    if eval.is_empty() {
        return Err(ForaError::Config("KL drift needs a non-empty eval set".into()));
    }
    let empty = AdapterSet::empty();
    let mut total = 0.0;
    let mut positions = 0usize;
    for b in eval {
        let p = logits(trained, adapters, b)?;
        let q = logits(base, &empty, b)?;
        total += mean_row_kl(&p, &q)? * p.rows() as f64;
        positions += p.rows();
    }
    Ok(total / positions as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct SlotReport {
    pub slot: Slot,
    pub rank: usize,
    /// Effective rank of the unscaled `B·A`.
    pub erank: f64,
    pub erank_ratio: f64,
    /// `σ_r / σ_1` of `B·A`.
    pub tail_ratio: f64,
    #[serde(skip)]
    pub spectrum: Spectrum,
    /// `‖s·B·A‖_F`, the deployed update.
    pub dw_frob: f64,
    /// `‖B·A‖_F`.
    pub ba_frob: f64,
    pub b_drift: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdapterReport {
    pub slots: Vec<SlotReport>,
    pub mean_erank: f64,
    pub mean_erank_ratio: f64,
    pub mean_tail_ratio: f64,
    pub total_dw_frob: f64,
    pub kl_drift: f64,
    pub drift_max: f64,
}

/// Spectra, effective ranks and update norms for every slot, plus the
/// model-level KL drift on `eval`. Slots with `B·A = 0` get `erank = 0`.
pub fn report(weights: &BaseWeights, adapters: &AdapterSet, eval: &[Batch]) -> Result<AdapterReport> {
    let mut slots = Vec::with_capacity(adapters.len());
    for p in adapters.iter() {
        let ba = p.product();
        let r = p.rank();
        let full = singular_values(&ba);
        let spectrum = Spectrum::from_values(full.values()[..r.min(full.len())].to_vec());
        let erank = match effective_rank(&spectrum) {
            Ok(e) => e,
            Err(ForaError::ZeroSpectrum) => 0.0,
            Err(e) => return Err(e),
        };
        let s1 = spectrum.largest();
        let tail_ratio = if s1 > 0.0 {
            spectrum.values()[spectrum.len() - 1] / s1
        } else {
            0.0
        };
        let ba_frob = ba.frobenius_norm();
        slots.push(SlotReport {
            slot: p.slot,
            rank: r,
            erank,
            erank_ratio: erank / r as f64,
            tail_ratio,
            spectrum,
            dw_frob: ba_frob * p.scaling.abs(),
            ba_frob,
            b_drift: p.b.orthonormality_defect(),
        });
    }
    let n = slots.len().max(1) as f64;
    let kl_drift = if eval.is_empty() {
        0.0
    } else {
        kl_adapter_drift(weights, adapters, eval)?
    };
    Ok(AdapterReport {
        mean_erank: slots.iter().map(|s| s.erank).sum::<f64>() / n,
        mean_erank_ratio: slots.iter().map(|s| s.erank_ratio).sum::<f64>() / n,
        mean_tail_ratio: slots.iter().map(|s| s.tail_ratio).sum::<f64>() / n,
        total_dw_frob: slots.iter().map(|s| s.dw_frob * s.dw_frob).sum::<f64>().sqrt(),
        drift_max: slots.iter().map(|s| s.b_drift).fold(0.0, f64::max),
        kl_drift,
        slots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossLayerCorrelation {
    /// Mean `|ρ|` over off-diagonal layer pairs.
    pub mean_offdiag: f64,
    pub max_offdiag: f64,
    /// `mean_offdiag` divided by the mean diagonal magnitude.
    pub ratio: f64,
}

/// Pearson correlation between layers of per-batch gradient norms.
/// `per_batch[n][ℓ]` is the gradient norm of layer `ℓ` on batch `n`.
/// Layers with zero variance correlate as 0 with everything else.
pub fn gradient_norm_correlation(per_batch: &[Vec<f64>]) -> Result<CrossLayerCorrelation> {
    if per_batch.len() < 2 {
        return Err(ForaError::Config("correlation needs at least 2 batches".into()));
    }
    let l = per_batch[0].len();
    let n = per_batch.len() as f64;
    let mean: Vec<f64> = (0..l).map(|j| per_batch.iter().map(|b| b[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = (0..l)
        .map(|j| per_batch.iter().map(|b| b[j] - mean[j]).collect())
        .collect();
    let norm: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let corr = |i: usize, j: usize| -> f64 {
        if norm[i] == 0.0 || norm[j] == 0.0 {
            return 0.0;
        }
        centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / (norm[i] * norm[j])
    };
    let (mut sum, mut max, mut count) = (0.0, 0.0f64, 0usize);
    let mut diag = 0.0;
    for i in 0..l {
        diag += corr(i, i).abs();
        for j in 0..l {
            if i != j {
                let c = corr(i, j).abs();
                sum += c;
                max = max.max(c);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(CrossLayerCorrelation {
            mean_offdiag: 0.0,
            max_offdiag: 0.0,
            ratio: 0.0,
        });
    }
    let mean_offdiag = sum / count as f64;
    let mean_diag = diag / l as f64;
    Ok(CrossLayerCorrelation {
        mean_offdiag,
        max_offdiag: max,
        ratio: if mean_diag > 0.0 { mean_offdiag / mean_diag } else { 0.0 },
    })
}

/// Cross-layer correlation of base-model gradient norms over `calib`.
pub fn cross_layer_gradient_correlation(weights: &BaseWeights, calib: &[Batch]) -> Result<CrossLayerCorrelation> {
    let mut per_batch = Vec::with_capacity(calib.len());
    for b in calib {
        let (_, g) = base_layer_gradients(weights, b)?;
        per_batch.push(g.iter().map(|l| l.squared_norm().sqrt()).collect());
    }
    gradient_norm_correlation(&per_batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaseInit;
    use crate::adapter::{init_adapters, AdapterSpec, BInit};
    use crate::fisher::SelectionSet;
    use crate::linalg::{random_gaussian, Matrix};
    use crate::model::ModelConfig;
    use crate::rng::{streams, RngStream};
    use proptest::prelude::*;

    fn spec(values: &[f64]) -> Spectrum {
        Spectrum::from_values(values.to_vec())
    }

    #[test]
    fn erank_examples() {
        assert!((effective_rank(&spec(&[1.0; 4])).unwrap() - 4.0).abs() <= 1e-15);
        assert_eq!(effective_rank(&spec(&[5.0, 0.0, 0.0])).unwrap(), 1.0);
        let direct = (-0.75f64 * 0.75f64.ln() - 0.25 * 0.25f64.ln()).exp();
        assert!((effective_rank(&spec(&[3.0, 1.0])).unwrap() - direct).abs() <= 1e-15);
        assert!((direct - 1.754765).abs() < 1e-6);
        assert!(matches!(effective_rank(&spec(&[0.0, 0.0])), Err(ForaError::ZeroSpectrum)));
    }

    #[test]
    fn kl_hand_example() {
        // Logits whose softmax is (0.9, 0.1) and (0.5, 0.5).
        let p = Matrix::from_rows(&[[0.9f64.ln(), 0.1f64.ln()]]);
        let q = Matrix::from_rows(&[[0.0, 0.0]]);
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((mean_row_kl(&p, &q).unwrap() - expect).abs() <= 1e-14);
        assert!((expect - 0.3681).abs() < 1e-4);
    }

    fn small() -> (BaseWeights, Vec<Batch>) {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab: 9,
            seq_len: 5,
        };
        let w = BaseWeights::random(cfg, 3, BaseInit::default()).unwrap();
        let b = Batch::new(vec![vec![1, 2, 3, 4]], vec![vec![2, 3, 4, 5]]).unwrap();
        (w, vec![b])
    }

    #[test]
    fn identical_models_have_zero_drift() {
        let (w, eval) = small();
        assert!(kl_output_drift(&w, &w, &eval).unwrap() <= 1e-14);
    }

    #[test]
    fn zero_a_gives_zero_update_norm() {
        let (w, eval) = small();
        let s = AdapterSpec {
            r: 2,
            alpha_lora: 4.0,
            constrained: true,
            b_init: BInit::Orthonormal,
        };
        let mut set = init_adapters(&w.config, &SelectionSet::all(2), s, &mut RngStream::new(1, 5)).unwrap();
        for p in set.iter_mut() {
            p.a = Matrix::zeros(p.a.rows(), p.a.cols());
        }
        let rep = report(&w, &set, &eval).unwrap();
        assert!(rep.slots.iter().all(|s| s.dw_frob == 0.0));
        assert!(rep.kl_drift <= 1e-14);
    }

    #[test]
    fn init_erank_matches_monte_carlo() {
        let cfg = ModelConfig::default();
        let s = AdapterSpec {
            r: 8,
            alpha_lora: 16.0,
            constrained: true,
            b_init: BInit::Orthonormal,
        };
        let set = init_adapters(&cfg, &SelectionSet::all(cfg.n_layers), s, &mut RngStream::new(4, streams::ADAPTERS)).unwrap();
        let w = BaseWeights::random(cfg, 1, BaseInit::default()).unwrap();
        let rep = report(&w, &set, &[]).unwrap();
        let mut mc = RngStream::new(5, streams::TEST);
        let mut acc = 0.0;
        let trials = 400;
        for i in 0..trials {
            let cols = if i % 2 == 0 { 64 } else { 128 };
            let a = random_gaussian(8, cols, 1.0, &mut mc);
            acc += effective_rank(&singular_values(&a)).unwrap() / 8.0;
        }
        // Three of five modules have d_in = 64, two have 128.
        let mc_ratio = acc / trials as f64;
        assert!((rep.mean_erank_ratio - mc_ratio).abs() < 0.02, "{} {mc_ratio}", rep.mean_erank_ratio);
    }

    #[test]
    fn correlation_of_tied_columns_is_one() {
        let mut s = RngStream::new(1, streams::TEST);
        let per: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let x = s.uniform();
                vec![x, x]
            })
            .collect();
        let c = gradient_norm_correlation(&per).unwrap();
        assert!((c.mean_offdiag - 1.0).abs() < 1e-12);
        let single: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        assert_eq!(gradient_norm_correlation(&single).unwrap().mean_offdiag, 0.0);
    }

    #[test]
    fn model_correlation_is_bounded() {
        let (w, _) = small();
        let calib: Vec<Batch> = (0..4)
            .map(|i| Batch::new(vec![vec![i, i + 1, 2]], vec![vec![3, i, 1]]).unwrap())
            .collect();
        let c = cross_layer_gradient_correlation(&w, &calib).unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&c.max_offdiag));
    }

    proptest! {
        #[test]
        fn erank_scale_invariant(v in proptest::collection::vec(0.0f64..5.0, 1..10), c in 1e-3f64..1e3) {
            prop_assume!(v.iter().any(|&x| x > 0.0));
            let a = effective_rank(&spec(&v)).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let b = effective_rank(&spec(&scaled)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            prop_assert!(a >= 1.0 - 1e-12 && a <= v.len() as f64 + 1e-12);
        }

        #[test]
        fn kl_is_non_negative(seed in 0u64..1000) {
            let mut s = RngStream::new(seed, streams::TEST);
            let p = random_gaussian(3, 6, 2.0, &mut s);
            let q = random_gaussian(3, 6, 2.0, &mut s);
            prop_assert!(mean_row_kl(&p, &q).unwrap() >= 0.0);
        }
    }
}
