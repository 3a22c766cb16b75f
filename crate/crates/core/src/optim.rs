//! Dual optimizer: AdamW on every `A` (and on unconstrained `B`), Cayley-Adam
//! on every Stiefel-constrained `B`.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::autodiff::backward;
use crate::error::{ForaError, Result};
use crate::linalg::Matrix;
use crate::manifold::{
    build_skew, cayley_fixed_point, qr_retract, spectral_norm_estimate, StiefelPoint, DRIFT_LIMIT,
};
use crate::model::{forward, BaseWeights, Batch, Slot};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Upper bound on `α·‖W‖₂` for the Cayley fixed-point solve.
pub const STEP_CLAMP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
enum SecondMoment {
    Elementwise(Matrix),
    Scalar(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Matrix,
    v: SecondMoment,
    t: u64,
}

impl AdamState {
    /// Elementwise second moment (AdamW).
    pub fn elementwise(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: SecondMoment::Elementwise(Matrix::zeros(rows, cols)),
            t: 0,
        }
    }

    /// Scalar second moment tracking `‖grad‖_F²` (Cayley-Adam).
    pub fn scalar(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: SecondMoment::Scalar(0.0),
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn m(&self) -> &Matrix {
        &self.m
    }

    /// Bias-corrected first moment.
    pub fn m_hat(&self) -> Matrix {
        self.m.scale(1.0 / (1.0 - BETA1.powi(self.t as i32)))
    }

    fn update_first(&mut self, grad: &Matrix) -> Result<()> {
        if grad.shape() != self.m.shape() {
            return Err(ForaError::ShapeMismatch {
                op: "adam",
                lhs: self.m.shape(),
                rhs: grad.shape(),
            });
        }
        self.t += 1;
        for (m, g) in self.m.data_mut().iter_mut().zip(grad.data()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
        }
        Ok(())
    }
}

/// Bias-corrected Adam with decoupled weight decay:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
pub fn adamw_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState, lr: f64, wd: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(ForaError::ShapeMismatch {
            op: "adamw_step",
            lhs: param.shape(),
            rhs: grad.shape(),
        });
    }
    state.update_first(grad)?;
    let SecondMoment::Elementwise(v) = &mut state.v else {
        return Err(ForaError::Config("adamw_step needs an elementwise state".into()));
    };
    for (v, g) in v.data_mut().iter_mut().zip(grad.data()) {
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    }
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    let decay = 1.0 - lr * wd;
    for ((p, m), v) in param
        .data_mut()
        .iter_mut()
        .zip(state.m.data())
        .zip(v.data())
    {
        let update = (m / c1) / ((v / c2).sqrt() + EPS);
        *p = *p * decay - lr * update;
    }
    Ok(())
}

/// What a Cayley-Adam step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CayleyStepInfo {
    /// Step size actually used, after the `α·‖W‖₂` clamp.
    pub alpha: f64,
    pub clamped: bool,
    /// Drift after the Cayley update and before any retraction.
    pub drift: f64,
    pub retracted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CayleyConfig {
    pub lr: f64,
    pub n_c: usize,
    pub t_qr: usize,
}

/// One Cayley-Adam step on a Stiefel point.
///
/// The first moment tracks the raw Euclidean gradient; the skew direction is
/// built from the descent direction `−m̂`; the step size is
/// `lr/(√v̂ + ε)` with `v̂` the bias-corrected EMA of `‖grad‖_F²`, clamped so
/// that `α·‖W‖₂ ≤ 0.5`. The point is re-projected by QR every `t_qr` steps
/// or as soon as its drift exceeds `1e-3`.
pub fn cayley_adam_step(
    point: StiefelPoint,
    grad: &Matrix,
    state: &mut AdamState,
    cfg: CayleyConfig,
) -> Result<(StiefelPoint, CayleyStepInfo)> {
    if point.b().shape() != grad.shape() {
        return Err(ForaError::ShapeMismatch {
            op: "cayley_adam_step",
            lhs: point.b().shape(),
            rhs: grad.shape(),
        });
    }
    state.update_first(grad)?;
    let gsq = grad.sum_squares();
    let SecondMoment::Scalar(v) = &mut state.v else {
        return Err(ForaError::Config("cayley_adam_step needs a scalar state".into()));
    };
    *v = BETA2 * *v + (1.0 - BETA2) * gsq;
    let v_hat = *v / (1.0 - BETA2.powi(state.t as i32));
    let mut alpha = cfg.lr / (v_hat.sqrt() + EPS);

    let descent = state.m_hat().scale(-1.0);
    let mut clamped = false;
    let b = if descent.max_abs() == 0.0 || alpha == 0.0 {
        point.into_inner()
    } else {
        let skew = build_skew(point.b(), &descent)?;
        let norm = spectral_norm_estimate(&skew, 3, 0)?;
        if alpha * norm > STEP_CLAMP {
            alpha = STEP_CLAMP / norm;
            clamped = true;
        }
        cayley_fixed_point(&skew, point.b(), alpha, cfg.n_c)?
    };
    if !b.is_finite() {
        return Err(ForaError::NonFinite("cayley_adam_step"));
    }
    let drift = b.orthonormality_defect();
    let due = cfg.t_qr > 0 && state.t.is_multiple_of(cfg.t_qr as u64);
    let retracted = due || drift > DRIFT_LIMIT;
    let point = if retracted {
        qr_retract(&b)?
    } else {
        StiefelPoint::new(b)
    };
    Ok((
        point,
        CayleyStepInfo {
            alpha,
            clamped,
            drift,
            retracted,
        },
    ))
}

/// Phase-2 hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_a: f64,
    pub lr_b: f64,
    /// Decoupled weight decay, applied to `A` only.
    pub weight_decay: f64,
    pub n_c: usize,
    pub t_qr: usize,
    pub steps: usize,
}

/// Desk-scale defaults: larger learning rates and fewer steps than
/// [`TrainConfig::large_model`] so a full protocol fits in minutes on one core.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_a: 1e-2,
            lr_b: 2e-2,
            weight_decay: 0.01,
            n_c: 5,
            t_qr: 200,
            steps: 150,
        }
    }
}

impl TrainConfig {
    /// Large-model recipe: smaller learning rates, longer training.
    pub fn large_model() -> Self {
        Self {
            lr_a: 2e-4,
            lr_b: 1e-3,
            steps: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForaError::Config(m.into()));
        if !(self.lr_a >= 0.0 && self.lr_b >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative");
        }
        if !(self.lr_a.is_finite() && self.lr_b.is_finite() && self.weight_decay.is_finite()) {
            return bad("learning rates and weight decay must be finite");
        }
        if self.n_c == 0 {
            return bad("n_c must be >= 1");
        }
        if self.t_qr == 0 {
            return bad("t_qr must be >= 1");
        }
        Ok(())
    }
}

/// Per-step training log entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Loss of the batch before the update.
    pub loss: f64,
    /// Largest `‖BᵀB − I‖_F` over all `B` factors after the update and
    /// before retraction.
    pub drift_max: f64,
    pub wall_ms: f64,
    pub retractions: usize,
    pub adamw_updates: usize,
    pub cayley_updates: usize,
}

#[derive(Debug, Clone)]
struct SlotMoments {
    a: AdamState,
    b: AdamState,
}

/// Adapters plus optimizer moments and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    adapters: AdapterSet,
    moments: BTreeMap<Slot, SlotMoments>,
    step: usize,
}

impl TrainState {
    pub fn new(adapters: AdapterSet) -> Self {
        let moments = adapters
            .iter()
            .map(|p| {
                let (ar, ac) = p.a.shape();
                let (br, bc) = p.b.shape();
                let b = if p.constrained {
                    AdamState::scalar(br, bc)
                } else {
                    AdamState::elementwise(br, bc)
                };
                (
                    p.slot,
                    SlotMoments {
                        a: AdamState::elementwise(ar, ac),
                        b,
                    },
                )
            })
            .collect();
        Self {
            adapters,
            moments,
            step: 0,
        }
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn into_adapters(self) -> AdapterSet {
        self.adapters
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One forward/backward pass on `batch` followed by one update of every
    /// adapter factor.
    pub fn step(&mut self, weights: &BaseWeights, batch: &Batch, cfg: &TrainConfig) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step;
        let pass = forward(weights, &self.adapters, batch)?;
        let vars = pass.adapters.clone();
        let mut tape = pass.tape;
        let loss_var = tape.cross_entropy(pass.logits, batch.targets())?;
        let loss = tape.value(loss_var)[(0, 0)];
        if !loss.is_finite() {
            return Err(ForaError::NonFiniteLoss { step });
        }
        let mut grads = backward(&tape, loss_var)?;
        drop(tape);

        let mut record = StepRecord {
            step,
            loss,
            drift_max: 0.0,
            wall_ms: 0.0,
            retractions: 0,
            adamw_updates: 0,
            cayley_updates: 0,
        };
        for (slot, v) in vars {
            let ga = grads.take(v.a).unwrap_or_else(|| Matrix::zeros(v.a.shape().0, v.a.shape().1));
            let gb = grads.take(v.b).unwrap_or_else(|| Matrix::zeros(v.b.shape().0, v.b.shape().1));
            let pair = self.adapters.get_mut(slot).expect("slot from this adapter set");
            let mom = self.moments.get_mut(&slot).expect("moments for every slot");

            adamw_step(&mut pair.a, &ga, &mut mom.a, cfg.lr_a, cfg.weight_decay)?;
            record.adamw_updates += 1;

            if pair.constrained {
                let point = StiefelPoint::new(std::mem::replace(&mut pair.b, Matrix::zeros(0, 0)));
                let (point, info) = cayley_adam_step(
                    point,
                    &gb,
                    &mut mom.b,
                    CayleyConfig {
                        lr: cfg.lr_b,
                        n_c: cfg.n_c,
                        t_qr: cfg.t_qr,
                    },
                )?;
                pair.b = point.into_inner();
                record.cayley_updates += 1;
                record.retractions += usize::from(info.retracted);
                record.drift_max = record.drift_max.max(info.drift);
            } else {
                adamw_step(&mut pair.b, &gb, &mut mom.b, cfg.lr_b, 0.0)?;
                record.adamw_updates += 1;
                record.drift_max = record.drift_max.max(pair.b.orthonormality_defect());
            }
            if !pair.a.is_finite() || !pair.b.is_finite() {
                return Err(ForaError::NonFinite("optimizer update"));
            }
        }
        self.step += 1;
        record.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(record)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub records: Vec<StepRecord>,
}

/// Run `cfg.steps` steps, cycling through `data` in order.
pub fn train(weights: &BaseWeights, adapters: AdapterSet, data: &[Batch], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.steps > 0 {
        return Err(ForaError::Config("training data is empty".into()));
    }
    let mut state = TrainState::new(adapters);
    let mut records = Vec::with_capacity(cfg.steps);
    for i in 0..cfg.steps {
        records.push(state.step(weights, &data[i % data.len()], cfg)?);
    }
    Ok(TrainOutcome {
        adapters: state.into_adapters(),
        records,
    })
}
