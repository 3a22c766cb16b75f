//! Small decoder-only transformer used as the frozen base model.
//!
//! Pre-layernorm blocks with residual connections:
//!
//! ```text
//! h = x + Wo · attn(q, k, v)        q, k, v = LN₁(x) Wqᵀ, LN₁(x) Wkᵀ, LN₁(x) Wvᵀ
//! x' = h + Wdown · relu(Wup · LN₂(h))
//! logits = LN_f(x_L) · head
//! ```
//!
//! Only the five projections `{q, k, v, up, down}` of each layer can carry
//! adapters. The output projection and layernorm gains are always frozen.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::autodiff::{backward, softmax_in_place, Tape, Var};
use crate::error::{ForaError, Result};
use crate::linalg::{random_gaussian, Matrix};
use crate::rng::{streams, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab: 64,
            seq_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab,
            self.seq_len,
        ];
        if counts.contains(&0) {
            return Err(ForaError::Config("all model dimensions must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ForaError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a target projection.
    pub fn module_shape(&self, module: Module) -> (usize, usize) {
        match module {
            Module::Q | Module::K | Module::V => (self.d_model, self.d_model),
            Module::Up => (self.d_ff, self.d_model),
            Module::Down => (self.d_model, self.d_ff),
        }
    }
}

/// The five adaptable projections of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Q,
    K,
    V,
    Up,
    Down,
}

impl Module {
    pub const ALL: [Module; 5] = [Module::Q, Module::K, Module::V, Module::Up, Module::Down];

    pub fn name(self) -> &'static str {
        match self {
            Module::Q => "q",
            Module::K => "k",
            Module::V => "v",
            Module::Up => "up",
            Module::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// One adaptable projection: `(layer, module)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub layer: usize,
    pub module: Module,
}

impl Slot {
    pub fn new(layer: usize, module: Module) -> Self {
        Self { layer, module }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.module.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub wup: Matrix,
    pub wdown: Matrix,
    pub ln1: Matrix,
    pub ln2: Matrix,
}

impl LayerWeights {
    pub fn module(&self, m: Module) -> &Matrix {
        match m {
            Module::Q => &self.wq,
            Module::K => &self.wk,
            Module::V => &self.wv,
            Module::Up => &self.wup,
            Module::Down => &self.wdown,
        }
    }

    pub fn module_mut(&mut self, m: Module) -> &mut Matrix {
        match m {
            Module::Q => &mut self.wq,
            Module::K => &mut self.wk,
            Module::V => &mut self.wv,
            Module::Up => &mut self.wup,
            Module::Down => &mut self.wdown,
        }
    }

    /// Named tensors in serialization order.
    pub fn named(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("up", &self.wup),
            ("down", &self.wdown),
            ("ln1", &self.ln1),
            ("ln2", &self.ln2),
        ]
    }
}

/// Scales applied on top of fan-in initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseInit {
    /// Multiplier on the output head; larger values give more peaked
    /// predictions.
    pub head_scale: f64,
    /// Multiplier on the projections writing into the residual stream
    /// (attention output and MLP down projection).
    pub residual_scale: f64,
}

impl Default for BaseInit {
    fn default() -> Self {
        Self {
            head_scale: 1.0,
            residual_scale: 1.0,
        }
    }
}

impl BaseInit {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.head_scale) || !ok(self.residual_scale) {
            return Err(ForaError::Config("init scales must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Frozen base parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerWeights>,
    pub ln_f: Matrix,
    pub head: Matrix,
}

impl BaseWeights {
    /// Random initialization with fan-in scaled Gaussians.
    pub fn random(config: ModelConfig, seed: u64, init: BaseInit) -> Result<Self> {
        config.validate()?;
        init.validate()?;
        let mut s = RngStream::new(seed, streams::BASE_WEIGHTS);
        let d = config.d_model;
        let ff = config.d_ff;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = random_gaussian(config.vocab, d, 1.0, &mut s);
        let pos = random_gaussian(config.seq_len, d, 1.0, &mut s);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                wq: random_gaussian(d, d, fan(d), &mut s),
                wk: random_gaussian(d, d, fan(d), &mut s),
                wv: random_gaussian(d, d, fan(d), &mut s),
                wo: random_gaussian(d, d, init.residual_scale * fan(d), &mut s),
                wup: random_gaussian(ff, d, fan(d), &mut s),
                wdown: random_gaussian(d, ff, init.residual_scale * fan(ff), &mut s),
                ln1: Matrix::from_fn(1, d, |_, _| 1.0),
                ln2: Matrix::from_fn(1, d, |_, _| 1.0),
            });
        }
        let ln_f = Matrix::from_fn(1, d, |_, _| 1.0);
        let head = random_gaussian(d, config.vocab, init.head_scale * fan(d), &mut s);
        Ok(Self {
            config,
            embed,
            pos,
            layers,
            ln_f,
            head,
        })
    }

    pub fn module(&self, slot: Slot) -> &Matrix {
        self.layers[slot.layer].module(slot.module)
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.named() {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("ln_f".into(), &self.ln_f));
        out.push(("head".into(), &self.head));
        out
    }

    /// Rebuild from named tensors (inverse of [`BaseWeights::named_tensors`]).
    pub fn from_named(config: ModelConfig, mut tensors: BTreeMap<String, Matrix>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let m = tensors
                .remove(name)
                .ok_or_else(|| ForaError::Config(format!("missing tensor {name}")))?;
            if m.shape() != (rows, cols) {
                return Err(ForaError::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    (rows, cols)
                )));
            }
            Ok(m)
        };
        let (d, ff) = (config.d_model, config.d_ff);
        let embed = take("embed", config.vocab, d)?;
        let pos = take("pos", config.seq_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |n: &str| format!("layers.{i}.{n}");
            layers.push(LayerWeights {
                wq: take(&p("wq"), d, d)?,
                wk: take(&p("wk"), d, d)?,
                wv: take(&p("wv"), d, d)?,
                wo: take(&p("wo"), d, d)?,
                wup: take(&p("up"), ff, d)?,
                wdown: take(&p("down"), d, ff)?,
                ln1: take(&p("ln1"), 1, d)?,
                ln2: take(&p("ln2"), 1, d)?,
            });
        }
        let ln_f = take("ln_f", 1, d)?;
        let head = take("head", d, config.vocab)?;
        Ok(Self {
            config,
            embed,
            pos,
            layers,
            ln_f,
            head,
        })
    }

    /// SHA-256 of the binary serialization, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            h.update(m.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A set of equal-length sequences with next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    n_seqs: usize,
    len: usize,
    tokens: Vec<usize>,
    targets: Vec<usize>,
}

impl Batch {
    pub fn new(tokens: Vec<Vec<usize>>, targets: Vec<Vec<usize>>) -> Result<Self> {
        let bad = |msg: String| ForaError::Config(format!("invalid batch: {msg}"));
        if tokens.is_empty() || tokens.len() != targets.len() {
            return Err(bad("token/target sequence counts differ or are zero".into()));
        }
        let len = tokens[0].len();
        if len == 0 {
            return Err(bad("empty sequence".into()));
        }
        for (t, y) in tokens.iter().zip(&targets) {
            if t.len() != len || y.len() != len {
                return Err(bad("sequences must share one length".into()));
            }
        }
        Ok(Self {
            n_seqs: tokens.len(),
            len,
            tokens: tokens.into_iter().flatten().collect(),
            targets: targets.into_iter().flatten().collect(),
        })
    }

    pub fn n_seqs(&self) -> usize {
        self.n_seqs
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    /// Flattened inputs, sequence-major.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn with_targets(&self, targets: Vec<usize>) -> Result<Self> {
        if targets.len() != self.targets.len() {
            return Err(ForaError::Config("target count mismatch".into()));
        }
        Ok(Self {
            targets,
            ..self.clone()
        })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.len > config.seq_len {
            return Err(ForaError::Config(format!(
                "sequence length {} exceeds model seq_len {}",
                self.len, config.seq_len
            )));
        }
        if self
            .tokens
            .iter()
            .chain(&self.targets)
            .any(|&t| t >= config.vocab)
        {
            return Err(ForaError::Config("token id >= vocab".into()));
        }
        Ok(())
    }
}

/// Which leaves of the forward tape are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    None,
    /// The five target projections of every layer.
    BaseModules,
    /// Adapter factors only.
    Adapters,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// Per layer, the five target-module leaves in [`Module::ALL`] order.
    pub base_modules: Vec<[Var; 5]>,
    pub adapters: BTreeMap<Slot, AdapterVars>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Matrix {
        self.tape.value(self.logits)
    }
}

/// Forward pass with adapter factors as the trainable leaves.
pub fn forward(weights: &BaseWeights, adapters: &AdapterSet, batch: &Batch) -> Result<ForwardPass> {
    forward_with(weights, adapters, batch, GradTarget::Adapters)
}

pub fn forward_with(
    weights: &BaseWeights,
    adapters: &AdapterSet,
    batch: &Batch,
    target: GradTarget,
) -> Result<ForwardPass> {
    let cfg = &weights.config;
    batch.validate(cfg)?;
    adapters.validate_against(cfg)?;
    let mut tape = Tape::new();
    let t = batch.seq_len();
    let n = batch.n_seqs() * t;

    let embed = tape.constant(weights.embed.clone());
    let x_tok = tape.embed_lookup(embed, batch.tokens())?;
    let positions: Vec<usize> = (0..n).map(|i| i % t).collect();
    let pos = tape.constant(weights.pos.clone());
    let x_pos = tape.embed_lookup(pos, &positions)?;
    let mut x = tape.add(x_tok, x_pos)?;

    let base_leaf = |tape: &mut Tape, m: &Matrix| {
        if target == GradTarget::BaseModules {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };

    let mut base_modules = Vec::with_capacity(cfg.n_layers);
    let mut adapter_vars = BTreeMap::new();
    for (li, layer) in weights.layers.iter().enumerate() {
        let mut mods = [x; 5];
        for m in Module::ALL {
            mods[m.index()] = base_leaf(&mut tape, layer.module(m));
        }
        base_modules.push(mods);

        let mut project = |tape: &mut Tape, input: Var, module: Module| -> Result<Var> {
            let base = tape.matmul_nt(input, mods[module.index()])?;
            let slot = Slot::new(li, module);
            let Some(pair) = adapters.get(slot) else {
                return Ok(base);
            };
            let (a, b) = if target == GradTarget::Adapters {
                (tape.param(pair.a.clone()), tape.param(pair.b.clone()))
            } else {
                (tape.constant(pair.a.clone()), tape.constant(pair.b.clone()))
            };
            adapter_vars.insert(slot, AdapterVars { a, b });
            let xa = tape.matmul_nt(input, a)?;
            let xab = tape.matmul_nt(xa, b)?;
            let delta = tape.scale(xab, pair.scaling);
            tape.add(base, delta)
        };

        let ln1 = tape.constant(layer.ln1.clone());
        let normed = tape.layernorm_rows(x);
        let h_in = tape.mul_row(normed, ln1)?;
        let q = project(&mut tape, h_in, Module::Q)?;
        let k = project(&mut tape, h_in, Module::K)?;
        let v = project(&mut tape, h_in, Module::V)?;
        let att = tape.causal_attention(q, k, v, cfg.n_heads, t)?;
        let wo = tape.constant(layer.wo.clone());
        let att_out = tape.matmul_nt(att, wo)?;
        let h = tape.add(x, att_out)?;

        let ln2 = tape.constant(layer.ln2.clone());
        let normed2 = tape.layernorm_rows(h);
        let m_in = tape.mul_row(normed2, ln2)?;
        let up = project(&mut tape, m_in, Module::Up)?;
        let act = tape.relu(up);
        let down = project(&mut tape, act, Module::Down)?;
        x = tape.add(h, down)?;
    }

    let ln_f = tape.constant(weights.ln_f.clone());
    let normed = tape.layernorm_rows(x);
    let final_h = tape.mul_row(normed, ln_f)?;
    let head = tape.constant(weights.head.clone());
    let logits = tape.matmul(final_h, head)?;
    Ok(ForwardPass {
        tape,
        logits,
        base_modules,
        adapters: adapter_vars,
    })
}

/// Logits of the (optionally adapted) model, without keeping the tape.
pub fn logits(weights: &BaseWeights, adapters: &AdapterSet, batch: &Batch) -> Result<Matrix> {
    let pass = forward_with(weights, adapters, batch, GradTarget::None)?;
    let ForwardPass { tape, logits, .. } = pass;
    Ok(tape.value(logits).clone())
}

/// Mean next-token cross-entropy computed directly from logits.
pub fn loss(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() || targets.iter().any(|&t| t >= logits.cols()) {
        return Err(ForaError::ShapeMismatch {
            op: "loss",
            lhs: logits.shape(),
            rhs: (targets.len(), 1),
        });
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

/// Mean loss over a list of batches (each batch weighted equally).
pub fn mean_loss(weights: &BaseWeights, adapters: &AdapterSet, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += loss(&logits(weights, adapters, b)?, b.targets())?;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Row-wise softmax of a logits matrix.
pub fn probabilities(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        softmax_in_place(p.row_mut(i));
    }
    p
}

/// Gradients of the five target projections of one layer.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub layer: usize,
    pub modules: [Matrix; 5],
}

impl LayerGradients {
    pub fn squared_norm(&self) -> f64 {
        self.modules.iter().map(Matrix::sum_squares).sum()
    }
}

/// Per-layer gradients of the batch loss with respect to the base target
/// projections. Embedding, positional table, head, output projection and
/// layernorm gains are excluded. Returns `(loss, per-layer gradients)`.
pub fn base_layer_gradients(weights: &BaseWeights, batch: &Batch) -> Result<(f64, Vec<LayerGradients>)> {
    let pass = forward_with(weights, &AdapterSet::empty(), batch, GradTarget::BaseModules)?;
    let ForwardPass {
        mut tape,
        logits,
        base_modules,
        ..
    } = pass;
    let loss_var = tape.cross_entropy(logits, batch.targets())?;
    let loss_value = tape.value(loss_var)[(0, 0)];
    let mut grads = backward(&tape, loss_var)?;
    let out = base_modules
        .iter()
        .enumerate()
        .map(|(layer, vars)| LayerGradients {
            layer,
            modules: vars.map(|v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Matrix::zeros(v.shape().0, v.shape().1))
            }),
        })
        .collect();
    Ok((loss_value, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab: 10,
            seq_len: 6,
        }
    }

    fn batch(cfg: &ModelConfig, n: usize, len: usize, seed: u64) -> Batch {
        let mut s = RngStream::new(seed, streams::TEST);
        let toks: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..len).map(|_| s.below(cfg.vocab)).collect())
            .collect();
        let tgts: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..len).map(|_| s.below(cfg.vocab)).collect())
            .collect();
        Batch::new(toks, tgts).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn logits_shape() {
        let cfg = tiny_config();
        let w = BaseWeights::random(cfg, 1, BaseInit::default()).unwrap();
        let b = batch(&cfg, 3, 5, 2);
        let l = logits(&w, &AdapterSet::empty(), &b).unwrap();
        assert_eq!(l.shape(), (15, cfg.vocab));
        assert!(l.is_finite());
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let l = Matrix::zeros(5, 64);
        let v = loss(&l, &[0, 3, 63, 7, 9]).unwrap();
        assert!((v - 64f64.ln()).abs() < 1e-12);
        assert!((v - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_loss_is_near_zero() {
        let mut l = Matrix::zeros(2, 4);
        l[(0, 1)] = 60.0;
        l[(1, 3)] = 60.0;
        assert!(loss(&l, &[1, 3]).unwrap() < 1e-20);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut s = RngStream::new(3, streams::TEST);
        let l = random_gaussian(6, 5, 2.0, &mut s);
        let targets = [0, 4, 2, 2, 1, 3];
        let p = probabilities(&l);
        let direct = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| p[(i, t)].ln())
            .sum::<f64>()
            / 6.0;
        assert!((loss(&l, &targets).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_direct_loss() {
        let cfg = tiny_config();
        let w = BaseWeights::random(cfg, 4, BaseInit::default()).unwrap();
        let b = batch(&cfg, 2, 6, 5);
        let (tape_loss, _) = base_layer_gradients(&w, &b).unwrap();
        let direct = loss(&logits(&w, &AdapterSet::empty(), &b).unwrap(), b.targets()).unwrap();
        assert!((tape_loss - direct).abs() < 1e-12);
    }

    #[test]
    fn base_gradients_cover_every_layer_and_are_finite() {
        let cfg = tiny_config();
        let w = BaseWeights::random(cfg, 6, BaseInit::default()).unwrap();
        // Length-1 sequences: each position only attends to itself.
        let b = batch(&cfg, 3, 1, 7);
        let (_, grads) = base_layer_gradients(&w, &b).unwrap();
        assert_eq!(grads.len(), cfg.n_layers);
        for g in &grads {
            for (m, gm) in Module::ALL.iter().zip(&g.modules) {
                assert_eq!(gm.shape(), cfg.module_shape(*m));
                assert!(gm.is_finite());
            }
        }
    }

    #[test]
    fn batch_validation() {
        let cfg = tiny_config();
        assert!(Batch::new(vec![vec![1, 2]], vec![vec![1]]).is_err());
        let long = Batch::new(vec![vec![0; 7]], vec![vec![0; 7]]).unwrap();
        assert!(long.validate(&cfg).is_err());
        let oov = Batch::new(vec![vec![10]], vec![vec![0]]).unwrap();
        assert!(oov.validate(&cfg).is_err());
    }

    #[test]
    fn named_tensors_round_trip() {
        let cfg = tiny_config();
        let w = BaseWeights::random(cfg, 8, BaseInit::default()).unwrap();
        let map: BTreeMap<String, Matrix> = w
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        let back = BaseWeights::from_named(cfg, map).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.digest(), w.digest());
    }

    /// Plain-loop forward pass, written independently of the tape.
    fn reference_logits(w: &BaseWeights, adapters: &AdapterSet, batch: &Batch) -> Vec<Vec<f64>> {
        let cfg = w.config;
        let t = batch.seq_len();
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let matvec = |m: &Matrix, x: &[f64]| -> Vec<f64> {
            (0..m.rows()).map(|i| (0..m.cols()).map(|j| m[(i, j)] * x[j]).sum()).collect()
        };
        let effective = |layer: usize, module: Module| -> Matrix {
            let w0 = w.layers[layer].module(module);
            match adapters.get(Slot::new(layer, module)) {
                Some(p) => Matrix::from_fn(w0.rows(), w0.cols(), |i, j| {
                    w0[(i, j)] + p.scaling * (0..p.rank()).map(|k| p.b[(i, k)] * p.a[(k, j)]).sum::<f64>()
                }),
                None => w0.clone(),
            }
        };
        let norm = |x: &[f64], g: &Matrix| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[(0, j)])
                .collect()
        };
        let mut out = Vec::new();
        for s in 0..batch.n_seqs() {
            let toks = &batch.tokens()[s * t..(s + 1) * t];
            let mut xs: Vec<Vec<f64>> = toks
                .iter()
                .enumerate()
                .map(|(p, &tok)| (0..d).map(|j| w.embed[(tok, j)] + w.pos[(p, j)]).collect())
                .collect();
            for (li, layer) in w.layers.iter().enumerate() {
                let (wq, wk, wv) = (effective(li, Module::Q), effective(li, Module::K), effective(li, Module::V));
                let hs: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, &layer.ln1)).collect();
                let q: Vec<Vec<f64>> = hs.iter().map(|h| matvec(&wq, h)).collect();
                let k: Vec<Vec<f64>> = hs.iter().map(|h| matvec(&wk, h)).collect();
                let v: Vec<Vec<f64>> = hs.iter().map(|h| matvec(&wv, h)).collect();
                for i in 0..t {
                    let mut att = vec![0.0; d];
                    for head in 0..cfg.n_heads {
                        let c = head * dh..(head + 1) * dh;
                        let sc: Vec<f64> = (0..=i)
                            .map(|j| c.clone().map(|x| q[i][x] * k[j][x]).sum::<f64>() / (dh as f64).sqrt())
                            .collect();
                        let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                        let z: f64 = sc.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..=i {
                            let pj = (sc[j] - mx).exp() / z;
                            for x in c.clone() {
                                att[x] += pj * v[j][x];
                            }
                        }
                    }
                    let o = matvec(&layer.wo, &att);
                    xs[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
                }
                let (wup, wdown) = (effective(li, Module::Up), effective(li, Module::Down));
                for x in xs.iter_mut() {
                    let m = norm(x, &layer.ln2);
                    let hidden: Vec<f64> = matvec(&wup, &m).into_iter().map(|v| v.max(0.0)).collect();
                    let o = matvec(&wdown, &hidden);
                    x.iter_mut().zip(o).for_each(|(a, b)| *a += b);
                }
            }
            for x in &xs {
                let h = norm(x, &w.ln_f);
                out.push((0..cfg.vocab).map(|c| (0..d).map(|j| h[j] * w.head[(j, c)]).sum()).collect());
            }
        }
        out
    }

    fn random_adapters(w: &BaseWeights, layers: &[usize], seed: u64) -> AdapterSet {
        use crate::adapter::{init_adapters, AdapterSpec, BInit};
        use crate::fisher::{SelectionSet, SelectionSource};
        let sel = SelectionSet::new(layers.to_vec(), w.config.n_layers, SelectionSource::Manual).unwrap();
        let spec = AdapterSpec {
            r: 2,
            alpha_lora: 4.0,
            constrained: false,
            b_init: BInit::Orthonormal,
        };
        init_adapters(&w.config, &sel, spec, &mut RngStream::new(seed, streams::TEST)).unwrap()
    }

    #[test]
    fn logits_match_plain_loop_reference() {
        let cfg = tiny_config();
        let w = BaseWeights::random(cfg, 11, BaseInit::default()).unwrap();
        let b = batch(&cfg, 2, 5, 12);
        for adapters in [AdapterSet::empty(), random_adapters(&w, &[1], 13)] {
            let got = logits(&w, &adapters, &b).unwrap();
            let want = reference_logits(&w, &adapters, &b);
            for (i, row) in want.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((got[(i, j)] - v).abs() < 1e-12, "({i},{j}) {} vs {v}", got[(i, j)]);
                }
            }
        }
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-300);
        assert!(
            rel <= 1e-5 || (analytic - numeric).abs() <= 1e-9,
            "{what}: analytic {analytic} numeric {numeric} rel {rel}"
        );
    }

    #[test]
    fn base_module_gradients_match_central_differences() {
        let cfg = tiny_config();
        let w = BaseWeights::random(cfg, 14, BaseInit::default()).unwrap();
        let b = batch(&cfg, 2, 6, 15);
        let (_, grads) = base_layer_gradients(&w, &b).unwrap();
        let h = 1e-5;
        let mut s = RngStream::new(16, streams::TEST);
        for layer in 0..cfg.n_layers {
            for m in Module::ALL {
                for _ in 0..5 {
                    let (rows, cols) = cfg.module_shape(m);
                    let (i, j) = (s.below(rows), s.below(cols));
                    let eval = |delta: f64| {
                        let mut p = w.clone();
                        p.layers[layer].module_mut(m)[(i, j)] += delta;
                        loss(&logits(&p, &AdapterSet::empty(), &b).unwrap(), b.targets()).unwrap()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let what = format!("layer{layer}.{} ({i},{j})", m.name());
                    assert_close(grads[layer].modules[m.index()][(i, j)], numeric, &what);
                }
            }
        }
    }

    #[test]
    fn adapter_gradients_match_central_differences() {
        let cfg = tiny_config();
        let w = BaseWeights::random(cfg, 17, BaseInit::default()).unwrap();
        let adapters = random_adapters(&w, &[0, 1], 18);
        let b = batch(&cfg, 2, 6, 19);
        let pass = forward(&w, &adapters, &b).unwrap();
        let ForwardPass {
            mut tape,
            logits: l,
            adapters: vars,
            ..
        } = pass;
        let loss_var = tape.cross_entropy(l, b.targets()).unwrap();
        let grads = backward(&tape, loss_var).unwrap();
        let h = 1e-5;
        let mut s = RngStream::new(20, streams::TEST);
        for (slot, v) in &vars {
            for which in 0..2 {
                let g = grads.get(if which == 0 { v.a } else { v.b }).unwrap();
                for _ in 0..5 {
                    let (i, j) = (s.below(g.rows()), s.below(g.cols()));
                    let eval = |delta: f64| {
                        let mut ad = adapters.clone();
                        let p = ad.get_mut(*slot).unwrap();
                        let m = if which == 0 { &mut p.a } else { &mut p.b };
                        m[(i, j)] += delta;
                        loss(&logits(&w, &ad, &b).unwrap(), b.targets()).unwrap()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    assert_close(g[(i, j)], numeric, &format!("{slot} factor {which} ({i},{j})"));
                }
            }
        }
    }
}
