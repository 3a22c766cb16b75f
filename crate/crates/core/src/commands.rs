//! The `fora` subcommands as library functions, so the binary, the FFI layer
//! and tests share one implementation.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::{load_adapters, save_adapters, save_base};
use crate::config::FileConfig;
use crate::diagnostics::{report, AdapterReport};
use crate::error::{ForaError, Result};
use crate::harness::{
    make_planted_task, matched_budget_arms, run_ablation_2x2, run_k_sweep, run_matched_budget, Arm, ArmSummary,
    ProtocolTable, RunResult, Runner, SweepTable,
};
use crate::model::mean_loss;
use crate::optim::StepRecord;
use crate::output::{line_plot_svg, num, Provenance, Series, Table};

/// Which arm `train` and `diag` run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArmChoice {
    #[default]
    Fora,
    FgLora,
    StiefelLora,
    LoraAll,
    RankHalved,
    RandomK,
}

impl ArmChoice {
    pub const ALL: [ArmChoice; 6] = [
        ArmChoice::Fora,
        ArmChoice::FgLora,
        ArmChoice::StiefelLora,
        ArmChoice::LoraAll,
        ArmChoice::RankHalved,
        ArmChoice::RandomK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArmChoice::Fora => "fora",
            ArmChoice::FgLora => "fg_lora",
            ArmChoice::StiefelLora => "stiefel_lora",
            ArmChoice::LoraAll => "lora_all",
            ArmChoice::RankHalved => "rank_halved",
            ArmChoice::RandomK => "random_k",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s.replace('-', "_"))
    }

    pub fn arm(self, cfg: &FileConfig) -> Arm {
        let (k, r) = (cfg.k, cfg.adapter.r);
        match self {
            ArmChoice::Fora => Arm::fora(k, r),
            ArmChoice::FgLora => Arm::fg_lora(k, r),
            ArmChoice::StiefelLora => Arm::stiefel_lora(r),
            ArmChoice::LoraAll => Arm::lora_all(r),
            ArmChoice::RankHalved => Arm::rank_halved(r),
            ArmChoice::RandomK => Arm::random_k(k, r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Score,
    Train { arm: ArmChoice },
    Diag { arm: ArmChoice, adapters: Option<PathBuf> },
    Ablate,
    SweepK,
    Matched,
    GenTask,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Score => "score",
            Command::Train { .. } => "train",
            Command::Diag { .. } => "diag",
            Command::Ablate => "ablate",
            Command::SweepK => "sweep-k",
            Command::Matched => "matched",
            Command::GenTask => "gen-task",
        }
    }
}

/// A fully resolved invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: FileConfig,
    pub seed: u64,
    pub out: PathBuf,
}

/// Files written by a command. `aborted` counts numerically aborted runs; the
/// CLI maps a non-zero count to exit code 3 after the partial results are
/// on disk.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub aborted: usize,
}

pub fn execute(inv: &Invocation) -> Result<Outcome> {
    inv.config.validate()?;
    fs::create_dir_all(&inv.out)?;
    let mut out = Outcome::default();
    let resolved = inv.out.join("config.toml");
    fs::write(&resolved, inv.config.to_toml())?;
    out.files.push(resolved);
    match &inv.command {
        Command::GenTask => gen_task(inv, &mut out)?,
        Command::Score => score(inv, &mut out)?,
        Command::Train { arm } => train_arm(inv, *arm, &mut out)?,
        Command::Diag { arm, adapters } => diag(inv, *arm, adapters.as_deref(), &mut out)?,
        Command::Ablate => {
            let seeds = inv.config.seeds(inv.seed);
            let mut runner = Runner::new(inv.config.experiment())?;
            let t = run_ablation_2x2(&mut runner, &seeds)?;
            protocol_tables(inv, "ablation", &seeds, &t, &mut out)?;
        }
        Command::Matched => {
            let seeds = inv.config.seeds(inv.seed);
            matched_budget_arms(&inv.config.experiment())?;
            let mut runner = Runner::new(inv.config.experiment())?;
            let t = run_matched_budget(&mut runner, &seeds)?;
            protocol_tables(inv, "matched", &seeds, &t, &mut out)?;
        }
        Command::SweepK => sweep(inv, &mut out)?,
    }
    Ok(out)
}

fn provenance(inv: &Invocation, seeds: &[u64]) -> Result<Provenance> {
    Provenance::new(inv.command.name(), &inv.config, seeds)
}

fn write_svg(inv: &Invocation, name: &str, svg: String, out: &mut Outcome) -> Result<()> {
    if inv.config.output.svg {
        let p = inv.out.join(name);
        fs::write(&p, svg)?;
        out.files.push(p);
    }
    Ok(())
}

fn layer_list(layers: &[usize]) -> String {
    layers.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn gen_task(inv: &Invocation, out: &mut Outcome) -> Result<()> {
    let cfg = inv.config.experiment();
    let task = make_planted_task(cfg.model, &cfg.task, inv.seed)?;
    let meta = json!({ "seed": inv.seed, "planted": task.planted });
    for (name, w) in [("base.ckpt", &task.student_base), ("teacher.ckpt", &task.teacher)] {
        let p = inv.out.join(name);
        save_base(&p, w, meta.clone())?;
        out.files.push(p.clone());
        out.files.push(crate::checkpoint::manifest_path(&p));
    }
    let mut t = Table::new(
        "task",
        &[
            "seed",
            "planted",
            "teacher_kl",
            "base_agreement",
            "base_loss",
            "base_digest",
            "teacher_digest",
        ],
    );
    let base_loss = mean_loss(&task.student_base, &crate::adapter::AdapterSet::empty(), &task.eval)?;
    t.push(vec![
        inv.seed.to_string(),
        layer_list(&task.planted),
        num(task.teacher_kl()?),
        num(task.base_agreement()?),
        num(base_loss),
        task.student_base.digest(),
        task.teacher.digest(),
    ]);
    out.files.push(t.write(&inv.out, &provenance(inv, &[inv.seed])?)?);
    Ok(())
}

fn score(inv: &Invocation, out: &mut Outcome) -> Result<()> {
    let mut runner = Runner::new(inv.config.experiment())?;
    let planted = runner.task(inv.seed)?.planted.clone();
    let scores = runner.fisher(inv.seed)?.clone();
    let selection = scores.select(inv.config.k)?;
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&a, &b| scores.scores[b].score.total_cmp(&scores.scores[a].score).then(a.cmp(&b)));
    let mut rank = vec![0; order.len()];
    for (i, &l) in order.iter().enumerate() {
        rank[l] = i + 1;
    }
    let mut t = Table::new("scores", &["layer", "score", "rank", "selected", "planted"]);
    for s in &scores.scores {
        t.push(vec![
            s.layer.to_string(),
            num(s.score),
            rank[s.layer].to_string(),
            selection.contains(s.layer).to_string(),
            planted.contains(&s.layer).to_string(),
        ]);
    }
    out.files.push(t.write(&inv.out, &provenance(inv, &[inv.seed])?)?);
    let svg = line_plot_svg(
        "Fisher score per layer",
        "layer",
        "score",
        &[Series {
            name: scores.variant.name().into(),
            points: scores.scores.iter().map(|s| (s.layer as f64, s.score)).collect(),
        }],
    );
    write_svg(inv, "scores.svg", svg, out)
}

fn steps_table(records: &[StepRecord]) -> Table {
    let mut t = Table::new(
        "train",
        &[
            "step",
            "loss",
            "drift_max",
            "wall_ms",
            "retractions",
            "adamw_updates",
            "cayley_updates",
        ],
    );
    for r in records {
        t.push(vec![
            r.step.to_string(),
            num(r.loss),
            num(r.drift_max),
            format!("{:.3}", r.wall_ms),
            r.retractions.to_string(),
            r.adamw_updates.to_string(),
            r.cayley_updates.to_string(),
        ]);
    }
    t
}

const RUN_COLUMNS: [&str; 16] = [
    "arm",
    "seed",
    "layers",
    "r",
    "stiefel",
    "params",
    "init_eval_loss",
    "final_eval_loss",
    "final_train_loss",
    "erank_ratio",
    "tail_ratio",
    "dw_frob",
    "kl_drift",
    "drift_max",
    "planted_jaccard",
    "status",
];

fn run_row(r: &RunResult) -> Vec<String> {
    vec![
        r.arm.clone(),
        r.seed.to_string(),
        layer_list(&r.layers),
        r.r.to_string(),
        r.stiefel.to_string(),
        r.params.to_string(),
        num(r.init_eval_loss),
        num(r.final_eval_loss),
        num(r.final_train_loss),
        num(r.erank_ratio),
        num(r.tail_ratio),
        num(r.dw_frob),
        num(r.kl_drift),
        num(r.drift_max),
        num(r.planted_jaccard),
        r.aborted.as_deref().map_or("ok".into(), |m| format!("aborted: {m}")),
    ]
}

fn runs_table(name: &str, runs: &[RunResult]) -> Table {
    let mut t = Table::new(name, &RUN_COLUMNS);
    for r in runs {
        t.push(run_row(r));
    }
    t
}

fn summary_table(name: &str, arms: &[ArmSummary]) -> Table {
    let mut t = Table::new(
        name,
        &[
            "arm",
            "k",
            "r",
            "params",
            "loss_mean",
            "loss_std",
            "loss_median",
            "erank_ratio_median",
            "tail_ratio_median",
            "kl_median",
            "n_aborted",
        ],
    );
    for a in arms {
        t.push(vec![
            a.arm.clone(),
            a.k.to_string(),
            a.r.to_string(),
            a.params.to_string(),
            num(a.loss_mean),
            num(a.loss_std),
            num(a.loss_median),
            num(a.erank_ratio_median),
            num(a.tail_ratio_median),
            num(a.kl_median),
            a.n_aborted.to_string(),
        ]);
    }
    t
}

fn train_arm(inv: &Invocation, choice: ArmChoice, out: &mut Outcome) -> Result<()> {
    let mut runner = Runner::new(inv.config.experiment())?;
    let arm = choice.arm(&inv.config);
    let result = runner.run(&arm, inv.seed)?;
    let prov = provenance(inv, &[inv.seed])?;
    out.files.push(steps_table(&result.records).write(&inv.out, &prov)?);
    out.files.push(runs_table("summary", std::slice::from_ref(&result)).write(&inv.out, &prov)?);
    if let Some(reason) = &result.aborted {
        out.aborted = 1;
        eprintln!("training aborted: {reason}");
        return Ok(());
    }
    let adapters = result.adapters.as_ref().expect("finished run keeps its adapters");
    let p = inv.out.join("adapters.ckpt");
    save_adapters(
        &p,
        &inv.config.model,
        adapters,
        json!({ "arm": arm.name, "seed": inv.seed, "train": inv.config.train }),
    )?;
    out.files.push(p.clone());
    out.files.push(crate::checkpoint::manifest_path(&p));
    let svg = line_plot_svg(
        &format!("{} training loss", arm.name),
        "step",
        "loss",
        &[Series {
            name: arm.name.clone(),
            points: result.records.iter().map(|r| (r.step as f64, r.loss)).collect(),
        }],
    );
    write_svg(inv, "train.svg", svg, out)
}

fn diag(inv: &Invocation, choice: ArmChoice, path: Option<&Path>, out: &mut Outcome) -> Result<()> {
    let mut runner = Runner::new(inv.config.experiment())?;
    let adapters = match path {
        Some(p) => {
            let (config, a) = load_adapters(p)?;
            if config != inv.config.model {
                return Err(ForaError::Config(format!(
                    "adapter checkpoint {} was trained for a different model config",
                    p.display()
                )));
            }
            a
        }
        None => {
            let r = runner.run(&choice.arm(&inv.config), inv.seed)?;
            r.adapters.ok_or(ForaError::NonFinite("training before diagnostics"))?
        }
    };
    let task = runner.task(inv.seed)?;
    let rep: AdapterReport = report(&task.student_base, &adapters, &task.eval)?;
    let prov = provenance(inv, &[inv.seed])?;
    let mut t = Table::new(
        "diag",
        &[
            "slot",
            "rank",
            "erank",
            "erank_ratio",
            "tail_ratio",
            "dw_frob",
            "ba_frob",
            "b_drift",
        ],
    );
    for s in &rep.slots {
        t.push(vec![
            s.slot.to_string(),
            s.rank.to_string(),
            num(s.erank),
            num(s.erank_ratio),
            num(s.tail_ratio),
            num(s.dw_frob),
            num(s.ba_frob),
            num(s.b_drift),
        ]);
    }
    out.files.push(t.write(&inv.out, &prov)?);
    let mut m = Table::new("diag_model", &["kl_drift", "mean_erank", "mean_erank_ratio", "total_dw_frob", "drift_max"]);
    m.push(vec![
        num(rep.kl_drift),
        num(rep.mean_erank),
        num(rep.mean_erank_ratio),
        num(rep.total_dw_frob),
        num(rep.drift_max),
    ]);
    out.files.push(m.write(&inv.out, &prov)?);
    let mut sp = Table::new("spectrum", &["slot", "index", "sigma"]);
    let mut series = Vec::new();
    for s in &rep.slots {
        for (i, v) in s.spectrum.values().iter().enumerate() {
            sp.push(vec![s.slot.to_string(), (i + 1).to_string(), num(*v)]);
        }
        let top = s.spectrum.largest().max(f64::MIN_POSITIVE);
        series.push(Series {
            name: s.slot.to_string(),
            points: s
                .spectrum
                .values()
                .iter()
                .enumerate()
                .map(|(i, v)| ((i + 1) as f64, v / top))
                .collect(),
        });
    }
    out.files.push(sp.write(&inv.out, &prov)?);
    series.truncate(6);
    let svg = line_plot_svg("Normalized singular values of B·A", "index", "σ_i / σ_1", &series);
    write_svg(inv, "spectrum.svg", svg, out)
}

fn protocol_tables(inv: &Invocation, name: &str, seeds: &[u64], t: &ProtocolTable, out: &mut Outcome) -> Result<()> {
    let prov = provenance(inv, seeds)?;
    out.files.push(runs_table(&format!("{name}_runs"), &t.runs).write(&inv.out, &prov)?);
    out.files.push(summary_table(&format!("{name}_summary"), &t.arms).write(&inv.out, &prov)?);
    out.aborted += t.n_aborted();
    Ok(())
}

fn sweep(inv: &Invocation, out: &mut Outcome) -> Result<()> {
    let seeds = inv.config.seeds(inv.seed);
    let mut runner = Runner::new(inv.config.experiment())?;
    let t: SweepTable = run_k_sweep(&mut runner, &inv.config.protocol.k_values, &seeds)?;
    let prov = provenance(inv, &seeds)?;
    let mut tab = Table::new(
        "sweep_k",
        &[
            "k",
            "fg_lora_loss_mean",
            "fg_lora_loss_std",
            "fg_lora_loss_median",
            "fora_loss_mean",
            "fora_loss_std",
            "fora_loss_median",
            "params",
        ],
    );
    for p in &t.points {
        tab.push(vec![
            p.k.to_string(),
            num(p.fg_lora.loss_mean),
            num(p.fg_lora.loss_std),
            num(p.fg_lora.loss_median),
            num(p.fora.loss_mean),
            num(p.fora.loss_std),
            num(p.fora.loss_median),
            p.fora.params.to_string(),
        ]);
    }
    out.files.push(tab.write(&inv.out, &prov)?);
    out.files.push(runs_table("sweep_k_runs", &t.runs).write(&inv.out, &prov)?);
    let (fg_range, fora_range) = t.loss_ranges();
    let mut r = Table::new("sweep_k_ranges", &["fg_lora_range", "fora_range"]);
    r.push(vec![num(fg_range), num(fora_range)]);
    out.files.push(r.write(&inv.out, &prov)?);
    out.aborted += t.runs.iter().filter(|r| r.aborted.is_some()).count();
    let series = |name: &str, f: fn(&crate::harness::SweepPoint) -> f64| Series {
        name: name.into(),
        points: t.points.iter().map(|p| (p.k as f64, f(p))).collect(),
    };
    let svg = line_plot_svg(
        "Final eval loss across K (median over seeds)",
        "K",
        "loss",
        &[series("fg_lora", |p| p.fg_lora.loss_median), series("fora", |p| p.fora.loss_median)],
    );
    write_svg(inv, "sweep_k.svg", svg, out)
}
