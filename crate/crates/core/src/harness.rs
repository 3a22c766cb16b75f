//! Planted-layer task and the experiment protocols built on it.
//!
//! A teacher is the base model plus low-rank perturbations of the five target
//! projections at a known layer subset. Targets are the teacher's argmax
//! predictions on uniformly random input tokens, so the layers that matter
//! for the task are known exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapters, trainable_param_count, AdapterSet, AdapterSpec, BInit};
use crate::diagnostics::{kl_output_drift, report};
use crate::error::{ForaError, Result};
use crate::fisher::{jaccard, score_layers, FisherScores, FisherVariant, SelectionSet};
use crate::linalg::{matmul_nt, qr_thin, random_gaussian};
use crate::model::{logits, mean_loss, BaseInit, BaseWeights, Batch, ModelConfig, Module};
use crate::optim::{train, StepRecord, TrainConfig};
use crate::rng::{streams, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub k_planted: usize,
    pub perturb_rank: usize,
    /// `‖ΔW‖_F / ‖W₀‖_F` of every planted projection.
    pub perturb_scale: f64,
    /// Multiplier on the output head at base initialization.
    pub head_scale: f64,
    /// Multiplier on the residual-writing projections at base initialization.
    pub residual_scale: f64,
    pub batch_size: usize,
    /// Sequence length of generated data (at most the model's `seq_len`).
    pub seq_len: usize,
    pub n_train_batches: usize,
    pub n_calib_batches: usize,
    pub n_eval_batches: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            k_planted: 4,
            perturb_rank: 4,
            perturb_scale: 0.28,
            head_scale: 4.0,
            residual_scale: 1.0,
            batch_size: 16,
            seq_len: 32,
            n_train_batches: 64,
            n_calib_batches: 32,
            n_eval_batches: 8,
        }
    }
}

impl TaskConfig {
    pub fn base_init(&self) -> BaseInit {
        BaseInit {
            head_scale: self.head_scale,
            residual_scale: self.residual_scale,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(ForaError::Config(m));
        if self.k_planted > model.n_layers {
            return bad(format!(
                "k_planted {} exceeds n_layers {}",
                self.k_planted, model.n_layers
            ));
        }
        let min_dim = model.d_model.min(model.d_ff);
        if self.perturb_rank == 0 || self.perturb_rank > min_dim {
            return bad(format!("perturb_rank must be in 1..={min_dim}"));
        }
        if !(self.perturb_scale >= 0.0 && self.perturb_scale.is_finite()) {
            return bad("perturb_scale must be finite and non-negative".into());
        }
        self.base_init().validate()?;
        if self.seq_len == 0 || self.seq_len > model.seq_len {
            return bad(format!("task seq_len must be in 1..={}", model.seq_len));
        }
        if self.batch_size == 0 || self.n_train_batches == 0 || self.n_calib_batches == 0 || self.n_eval_batches == 0 {
            return bad("batch size and split sizes must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub teacher: BaseWeights,
    pub student_base: BaseWeights,
    /// Sorted indices of the perturbed layers.
    pub planted: Vec<usize>,
    pub train: Vec<Batch>,
    pub calib: Vec<Batch>,
    pub eval: Vec<Batch>,
    pub seed: u64,
}

/// Add `scale·‖W₀‖_F/√rank · U·Vᵀ` (orthonormal `U`, `V`) to every target
/// projection of `layers`.
fn perturb(weights: &BaseWeights, layers: &[usize], rank: usize, scale: f64, seed: u64) -> Result<BaseWeights> {
    let mut teacher = weights.clone();
    if scale == 0.0 {
        return Ok(teacher);
    }
    let mut s = RngStream::new(seed, streams::PERTURBATION);
    for &layer in layers {
        for m in Module::ALL {
            let w = teacher.layers[layer].module_mut(m);
            let (d_out, d_in) = w.shape();
            let u = qr_thin(&random_gaussian(d_out, rank, 1.0, &mut s))?.q;
            let v = qr_thin(&random_gaussian(d_in, rank, 1.0, &mut s))?.q;
            let delta = matmul_nt(&u, &v)?;
            let mag = scale * w.frobenius_norm() / (rank as f64).sqrt();
            w.add_assign(&delta, mag)?;
        }
    }
    Ok(teacher)
}

fn random_inputs(model: &ModelConfig, task: &TaskConfig, s: &mut RngStream) -> Vec<Vec<usize>> {
    (0..task.batch_size)
        .map(|_| (0..task.seq_len).map(|_| s.below(model.vocab)).collect())
        .collect()
}

fn label(teacher: &BaseWeights, inputs: Vec<Vec<usize>>) -> Result<Batch> {
    let placeholder = inputs.clone();
    let batch = Batch::new(inputs, placeholder)?;
    let l = logits(teacher, &crate::adapter::AdapterSet::empty(), &batch)?;
    let targets = (0..l.rows())
        .map(|i| {
            let row = l.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    batch.with_targets(targets)
}

/// Build the teacher, pick the planted layers and generate labeled splits.
pub fn make_planted_task(model: ModelConfig, task: &TaskConfig, seed: u64) -> Result<PlantedTask> {
    model.validate()?;
    task.validate(&model)?;
    let student_base = BaseWeights::random(model, seed, task.base_init())?;
    let planted = RngStream::new(seed, streams::PLANTED_LAYERS).subset(model.n_layers, task.k_planted);
    let teacher = perturb(&student_base, &planted, task.perturb_rank, task.perturb_scale, seed)?;
    let mut s = RngStream::new(seed, streams::DATA);
    let mut split = |n: usize| -> Result<Vec<Batch>> {
        (0..n)
            .map(|_| label(&teacher, random_inputs(&model, task, &mut s)))
            .collect()
    };
    let calib = split(task.n_calib_batches)?;
    let train = split(task.n_train_batches)?;
    let eval = split(task.n_eval_batches)?;
    Ok(PlantedTask {
        teacher,
        student_base,
        planted,
        train,
        calib,
        eval,
        seed,
    })
}

impl PlantedTask {
    /// `KL(p_teacher ‖ p_base)` over the eval split.
    pub fn teacher_kl(&self) -> Result<f64> {
        kl_output_drift(&self.student_base, &self.teacher, &self.eval)
    }

    /// Fraction of eval positions where the base model's argmax already
    /// equals the teacher's.
    pub fn base_agreement(&self) -> Result<f64> {
        let empty = crate::adapter::AdapterSet::empty();
        let (mut hit, mut total) = (0usize, 0usize);
        for b in &self.eval {
            let l = logits(&self.student_base, &empty, b)?;
            for (i, &t) in b.targets().iter().enumerate() {
                let row = l.row(i);
                let arg = (0..row.len()).fold(0, |a, j| if row[j] > row[a] { j } else { a });
                hit += usize::from(arg == t);
                total += 1;
            }
        }
        Ok(hit as f64 / total as f64)
    }
}

/// Teacher/base KL for a given `perturb_scale`, on one seed.
pub fn teacher_kl_at(model: ModelConfig, task: &TaskConfig, seed: u64, scale: f64) -> Result<f64> {
    let t = TaskConfig {
        perturb_scale: scale,
        n_train_batches: 1,
        n_calib_batches: 1,
        ..*task
    };
    make_planted_task(model, &t, seed)?.teacher_kl()
}

/// Bisect `perturb_scale` so the mean teacher/base KL over `seeds` hits
/// `target_kl`.
pub fn calibrate_perturb_scale(model: ModelConfig, task: &TaskConfig, seeds: &[u64], target_kl: f64) -> Result<f64> {
    let mean_kl = |scale: f64| -> Result<f64> {
        let mut acc = 0.0;
        for &s in seeds {
            acc += teacher_kl_at(model, task, s, scale)?;
        }
        Ok(acc / seeds.len().max(1) as f64)
    };
    let (mut lo, mut hi) = (0.0, 0.25);
    while mean_kl(hi)? < target_kl {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(ForaError::Config(format!("cannot reach KL {target_kl}")));
        }
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if mean_kl(mid)? < target_kl {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    pub n_batches: usize,
    pub variant: FisherVariant,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            n_batches: 32,
            variant: FisherVariant::Empirical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub r: usize,
    pub alpha_lora: f64,
    #[serde(default)]
    pub b_init: BInit,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha_lora: 16.0,
            b_init: BInit::Orthonormal,
        }
    }
}

/// Everything needed to run one experiment, minus the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub fisher: FisherConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Number of adapted layers for Fisher-selected and random arms.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    4
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            fisher: FisherConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            k: default_k(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(&self.model)?;
        self.train.validate()?;
        if self.k == 0 || self.k > self.model.n_layers {
            return Err(ForaError::KOutOfRange {
                k: self.k,
                n_layers: self.model.n_layers,
            });
        }
        if self.fisher.n_batches == 0 || self.fisher.n_batches > self.task.n_calib_batches {
            return Err(ForaError::Config(format!(
                "fisher.n_batches must be in 1..={}",
                self.task.n_calib_batches
            )));
        }
        if self.adapter.r == 0 {
            return Err(ForaError::Config("adapter rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// How an arm chooses its layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRule {
    All,
    Fisher(usize),
    Random(usize),
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub layers: LayerRule,
    pub stiefel: bool,
    pub r: usize,
}

impl Arm {
    pub fn lora_all(r: usize) -> Self {
        Self::new("lora_all", LayerRule::All, false, r)
    }

    pub fn fg_lora(k: usize, r: usize) -> Self {
        Self::new("fg_lora", LayerRule::Fisher(k), false, r)
    }

    pub fn stiefel_lora(r: usize) -> Self {
        Self::new("stiefel_lora", LayerRule::All, true, r)
    }

    pub fn fora(k: usize, r: usize) -> Self {
        Self::new("fora", LayerRule::Fisher(k), true, r)
    }

    pub fn rank_halved(r: usize) -> Self {
        Self::new("rank_halved", LayerRule::All, false, r / 2)
    }

    pub fn random_k(k: usize, r: usize) -> Self {
        Self::new("random_k", LayerRule::Random(k), false, r)
    }

    fn new(name: &str, layers: LayerRule, stiefel: bool, r: usize) -> Self {
        Self {
            name: name.into(),
            layers,
            stiefel,
            r,
        }
    }

    /// The run is fully determined by this key; arms with equal keys (for
    /// example Fisher top-`L` and all layers) share results.
    fn run_key(&self, n_layers: usize) -> (LayerRule, bool, usize) {
        let layers = match self.layers {
            LayerRule::Fisher(k) if k == n_layers => LayerRule::All,
            other => other,
        };
        (layers, self.stiefel, self.r)
    }

    pub fn param_count(&self, model: &ModelConfig) -> usize {
        let k = match self.layers {
            LayerRule::All => model.n_layers,
            LayerRule::Fisher(k) | LayerRule::Random(k) => k,
        };
        trainable_param_count(model, &(0..k).collect::<Vec<_>>(), self.r)
    }
}

/// Measurements from a single (arm, seed) training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub layers: Vec<usize>,
    pub r: usize,
    pub stiefel: bool,
    pub params: usize,
    pub init_eval_loss: f64,
    pub final_eval_loss: f64,
    pub final_train_loss: f64,
    pub erank_ratio: f64,
    pub tail_ratio: f64,
    pub dw_frob: f64,
    pub kl_drift: f64,
    pub drift_max: f64,
    pub planted_jaccard: f64,
    /// Set when training aborted numerically; metrics are then NaN.
    pub aborted: Option<String>,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
    /// Trained adapters, absent for aborted runs.
    #[serde(skip)]
    pub adapters: Option<AdapterSet>,
}

impl RunResult {
    fn aborted(arm: &Arm, seed: u64, layers: Vec<usize>, params: usize, reason: String) -> Self {
        Self {
            arm: arm.name.clone(),
            seed,
            layers,
            r: arm.r,
            stiefel: arm.stiefel,
            params,
            init_eval_loss: f64::NAN,
            final_eval_loss: f64::NAN,
            final_train_loss: f64::NAN,
            erank_ratio: f64::NAN,
            tail_ratio: f64::NAN,
            dw_frob: f64::NAN,
            kl_drift: f64::NAN,
            drift_max: f64::NAN,
            planted_jaccard: f64::NAN,
            aborted: Some(reason),
            records: Vec::new(),
            adapters: None,
        }
    }
}

/// Runs arms on per-seed planted tasks, caching tasks, Fisher scores and
/// finished runs so that protocols sharing an arm do not retrain it.
pub struct Runner {
    cfg: ExperimentConfig,
    tasks: BTreeMap<u64, PlantedTask>,
    scores: BTreeMap<u64, FisherScores>,
    runs: BTreeMap<((LayerRule, bool, usize), u64), RunResult>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            tasks: BTreeMap::new(),
            scores: BTreeMap::new(),
            runs: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn task(&mut self, seed: u64) -> Result<&PlantedTask> {
        if !self.tasks.contains_key(&seed) {
            let t = make_planted_task(self.cfg.model, &self.cfg.task, seed)?;
            self.tasks.insert(seed, t);
        }
        Ok(&self.tasks[&seed])
    }

    pub fn fisher(&mut self, seed: u64) -> Result<&FisherScores> {
        if !self.scores.contains_key(&seed) {
            let f = self.cfg.fisher;
            let task = self.task(seed)?;
            let s = score_layers(&task.student_base, &task.calib, f.n_batches, f.variant, seed)?;
            self.scores.insert(seed, s);
        }
        Ok(&self.scores[&seed])
    }

    pub fn selection(&mut self, rule: LayerRule, seed: u64) -> Result<SelectionSet> {
        let n = self.cfg.model.n_layers;
        match rule {
            LayerRule::All => Ok(SelectionSet::all(n)),
            LayerRule::Random(k) => SelectionSet::random(n, k, seed),
            LayerRule::Fisher(k) if k == n => Ok(SelectionSet::all(n)),
            LayerRule::Fisher(k) => self.fisher(seed)?.select(k),
        }
    }

    /// Train (or fetch from cache) one arm on one seed.
    pub fn run(&mut self, arm: &Arm, seed: u64) -> Result<RunResult> {
        let key = (arm.run_key(self.cfg.model.n_layers), seed);
        if let Some(r) = self.runs.get(&key) {
            let mut r = r.clone();
            r.arm = arm.name.clone();
            return Ok(r);
        }
        let selection = self.selection(arm.layers, seed)?;
        let cfg = self.cfg;
        let task = self.task(seed)?;
        let spec = AdapterSpec {
            r: arm.r,
            alpha_lora: cfg.adapter.alpha_lora * arm.r as f64 / cfg.adapter.r as f64,
            constrained: arm.stiefel,
            b_init: if arm.stiefel { BInit::Orthonormal } else { cfg.adapter.b_init },
        };
        let mut stream = RngStream::new(seed, streams::ADAPTERS);
        let adapters = init_adapters(&cfg.model, &selection, spec, &mut stream)?;
        let base = &task.student_base;
        let init_eval_loss = mean_loss(base, &adapters, &task.eval)?;
        let params = adapters.param_count();
        let outcome = match train(base, adapters, &task.train, &cfg.train) {
            Ok(o) => o,
            Err(e) if e.exit_code() == 3 => {
                let r = RunResult::aborted(arm, seed, selection.layers().to_vec(), params, e.to_string());
                self.runs.insert(key, r.clone());
                return Ok(r);
            }
            Err(e) => return Err(e),
        };
        let rep = report(base, &outcome.adapters, &task.eval)?;
        let tail = outcome.records.len().clamp(1, 10);
        let final_train_loss = if outcome.records.is_empty() {
            init_eval_loss
        } else {
            outcome.records[outcome.records.len() - tail..]
                .iter()
                .map(|r| r.loss)
                .sum::<f64>()
                / tail as f64
        };
        let result = RunResult {
            arm: arm.name.clone(),
            seed,
            layers: selection.layers().to_vec(),
            r: arm.r,
            stiefel: arm.stiefel,
            params: outcome.adapters.param_count(),
            init_eval_loss,
            final_eval_loss: mean_loss(base, &outcome.adapters, &task.eval)?,
            final_train_loss,
            erank_ratio: rep.mean_erank_ratio,
            tail_ratio: rep.mean_tail_ratio,
            dw_frob: rep.total_dw_frob,
            kl_drift: rep.kl_drift,
            drift_max: outcome.records.iter().map(|r| r.drift_max).fold(0.0, f64::max),
            planted_jaccard: jaccard(selection.layers(), &task.planted),
            aborted: None,
            records: outcome.records,
            adapters: Some(outcome.adapters),
        };
        self.runs.insert(key, result.clone());
        Ok(result)
    }
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-arm aggregate over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub k: usize,
    pub r: usize,
    pub params: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub loss_median: f64,
    pub erank_ratio_median: f64,
    pub tail_ratio_median: f64,
    pub kl_median: f64,
    pub n_aborted: usize,
}

/// Summary over the runs of one arm; aborted runs are counted and skipped.
pub fn summarize(arm: &Arm, runs: &[RunResult]) -> ArmSummary {
    let ok: Vec<&RunResult> = runs.iter().filter(|r| r.aborted.is_none()).collect();
    let col = |f: fn(&RunResult) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<_>>();
    let losses = col(|r| r.final_eval_loss);
    let (loss_mean, loss_std) = mean_std(&losses);
    ArmSummary {
        arm: arm.name.clone(),
        k: runs.first().map_or(0, |r| r.layers.len()),
        r: arm.r,
        params: runs.first().map_or(0, |r| r.params),
        loss_mean,
        loss_std,
        loss_median: median(&losses),
        erank_ratio_median: median(&col(|r| r.erank_ratio)),
        tail_ratio_median: median(&col(|r| r.tail_ratio)),
        kl_median: median(&col(|r| r.kl_drift)),
        n_aborted: runs.len() - ok.len(),
    }
}

/// Output of a protocol: every run plus per-arm summaries.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolTable {
    pub runs: Vec<RunResult>,
    pub arms: Vec<ArmSummary>,
}

impl ProtocolTable {
    /// Number of runs that aborted numerically.
    pub fn n_aborted(&self) -> usize {
        self.runs.iter().filter(|r| r.aborted.is_some()).count()
    }
}

fn run_arms(runner: &mut Runner, arms: &[Arm], seeds: &[u64]) -> Result<ProtocolTable> {
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for arm in arms {
        let mut per_arm = Vec::with_capacity(seeds.len());
        for &s in seeds {
            per_arm.push(runner.run(arm, s)?);
        }
        summaries.push(summarize(arm, &per_arm));
        runs.extend(per_arm);
    }
    Ok(ProtocolTable {
        runs,
        arms: summaries,
    })
}

/// LoRA-all, FG-LoRA, Stiefel-LoRA and FoRA on every seed.
pub fn run_ablation_2x2(runner: &mut Runner, seeds: &[u64]) -> Result<ProtocolTable> {
    let c = *runner.config();
    let arms = [
        Arm::lora_all(c.adapter.r),
        Arm::fg_lora(c.k, c.adapter.r),
        Arm::stiefel_lora(c.adapter.r),
        Arm::fora(c.k, c.adapter.r),
    ];
    run_arms(runner, &arms, seeds)
}

/// One point of a K sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub k: usize,
    pub fg_lora: ArmSummary,
    pub fora: ArmSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub points: Vec<SweepPoint>,
    pub runs: Vec<RunResult>,
}

impl SweepTable {
    /// `max − min` of the mean final loss across `k`, for FG-LoRA and FoRA.
    pub fn loss_ranges(&self) -> (f64, f64) {
        let range = |f: fn(&SweepPoint) -> f64| {
            let v: Vec<f64> = self.points.iter().map(f).collect();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        (range(|p| p.fg_lora.loss_median), range(|p| p.fora.loss_median))
    }
}

pub fn run_k_sweep(runner: &mut Runner, k_values: &[usize], seeds: &[u64]) -> Result<SweepTable> {
    let c = *runner.config();
    let mut points = Vec::new();
    let mut runs = Vec::new();
    for &k in k_values {
        if k == 0 || k > c.model.n_layers {
            return Err(ForaError::KOutOfRange {
                k,
                n_layers: c.model.n_layers,
            });
        }
        let t = run_arms(runner, &[Arm::fg_lora(k, c.adapter.r), Arm::fora(k, c.adapter.r)], seeds)?;
        let mut arms = t.arms.into_iter();
        points.push(SweepPoint {
            k,
            fg_lora: arms.next().expect("two arms"),
            fora: arms.next().expect("two arms"),
        });
        runs.extend(t.runs);
    }
    Ok(SweepTable { points, runs })
}

/// Full LoRA at `P₀` plus four arms at `P₀/2`: rank-halved LoRA on every
/// layer, random `L/2` layers, FG-LoRA and FoRA on `L/2` Fisher layers.
pub fn matched_budget_arms(cfg: &ExperimentConfig) -> Result<(Arm, Vec<Arm>)> {
    let (r, l) = (cfg.adapter.r, cfg.model.n_layers);
    if r % 2 != 0 {
        return Err(ForaError::Config(format!("matched budget needs an even rank, got {r}")));
    }
    if l % 2 != 0 {
        return Err(ForaError::Config(format!(
            "matched budget needs an even layer count, got {l}"
        )));
    }
    let half = l / 2;
    let reduced = vec![
        Arm::rank_halved(r),
        Arm::random_k(half, r),
        Arm::fg_lora(half, r),
        Arm::fora(half, r),
    ];
    let counts: Vec<(String, usize)> = reduced
        .iter()
        .map(|a| (a.name.clone(), a.param_count(&cfg.model)))
        .collect();
    if counts.iter().any(|(_, c)| *c != counts[0].1) {
        return Err(ForaError::BudgetMismatch(format!("{counts:?}")));
    }
    Ok((Arm::lora_all(r), reduced))
}

pub fn run_matched_budget(runner: &mut Runner, seeds: &[u64]) -> Result<ProtocolTable> {
    let (full, reduced) = matched_budget_arms(runner.config())?;
    let mut arms = vec![full];
    arms.extend(reduced);
    let table = run_arms(runner, &arms, seeds)?;
    let reduced_params: Vec<usize> = table.arms[1..].iter().map(|a| a.params).collect();
    if reduced_params.iter().any(|&p| p != reduced_params[0]) {
        return Err(ForaError::BudgetMismatch(format!("{reduced_params:?}")));
    }
    Ok(table)
}
