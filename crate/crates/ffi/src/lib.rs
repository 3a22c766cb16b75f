//! C ABI over `fora-core`.
//!
//! Objects are opaque handles created by `fora_*_new`-style functions and
//! released with the matching `fora_*_free`. Every fallible function returns a
//! [`ForaStatus`]; on failure, [`fora_last_error`] holds a message for the
//! calling thread until the next failing call. Status values 1–3 match the
//! CLI exit codes.
//!
//! Buffers are caller-owned. Functions that fill a buffer take its capacity and
//! write the required length to `*len` even when the buffer is too small, so a
//! first call with `cap = 0` can size the allocation.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fora_core::commands::{execute, ArmChoice, Command, Invocation};
use fora_core::config::FileConfig;
use fora_core::diagnostics::effective_rank;
use fora_core::fisher::{select_topk, LayerScore};
use fora_core::harness::{PlantedTask, RunResult, Runner};
use fora_core::linalg::Spectrum;
use fora_core::ForaError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForaStatus {
    Ok = 0,
    Io = 1,
    Config = 2,
    Numerical = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Experiment configuration.
pub struct ForaConfig(FileConfig);

/// A generated planted-layer task.
pub struct ForaTask(PlantedTask);

/// A finished training run.
pub struct ForaRun(RunResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &ForaError) -> ForaStatus {
    match e.exit_code() {
        1 => ForaStatus::Io,
        3 => ForaStatus::Numerical,
        _ => ForaStatus::Config,
    }
}

/// Run `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (ForaStatus, String)>) -> ForaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ForaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ForaStatus::Panic
        }
    }
}

fn core<T>(r: fora_core::Result<T>) -> Result<T, (ForaStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (ForaStatus, String) {
    (ForaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ForaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (ForaStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn fill<T: Copy>(src: &[T], out: *mut T, cap: usize, len: *mut usize) -> Result<(), (ForaStatus, String)> {
    if len.is_null() {
        return Err(null("len"));
    }
    *len = src.len();
    if src.len() > cap {
        return Err((
            ForaStatus::BufferTooSmall,
            format!("buffer holds {cap}, need {}", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

/// Message of the last failing call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fora_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<CString> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(fora_core::output::version_string()).expect("no nul in version"))
        .as_ptr()
}

/// Desk-default configuration. Never null.
#[no_mangle]
pub extern "C" fn fora_config_default() -> *mut ForaConfig {
    Box::into_raw(Box::new(ForaConfig(FileConfig::default())))
}

/// Parse a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fora_config_from_toml(toml: *const c_char, out: *mut *mut ForaConfig) -> ForaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(toml, "toml")?;
        let cfg = core(FileConfig::parse(text))?;
        *out = Box::into_raw(Box::new(ForaConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fora_config_free(cfg: *mut ForaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Set the number of training steps.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fora_config_set_steps(cfg: *mut ForaConfig, steps: usize) -> ForaStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        c.0.train.steps = steps;
        Ok(())
    })
}

/// Run a CLI subcommand (`score`, `train`, `diag`, `ablate`, `sweep-k`,
/// `matched`, `gen-task`) writing into `out_dir`. `train` and `diag` use the
/// FoRA arm.
///
/// # Safety
/// `cfg` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fora_run_command(
    cfg: *const ForaConfig,
    command: *const c_char,
    seed: u64,
    out_dir: *const c_char,
) -> ForaStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let name = str_arg(command, "command")?;
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let command = match name {
            "score" => Command::Score,
            "train" => Command::Train { arm: ArmChoice::Fora },
            "diag" => Command::Diag {
                arm: ArmChoice::Fora,
                adapters: None,
            },
            "ablate" => Command::Ablate,
            "sweep-k" => Command::SweepK,
            "matched" => Command::Matched,
            "gen-task" => Command::GenTask,
            other => return Err((ForaStatus::Config, format!("unknown command {other:?}"))),
        };
        let outcome = core(execute(&Invocation {
            command,
            config: c.0.clone(),
            seed,
            out,
        }))?;
        if outcome.aborted > 0 {
            return Err((
                ForaStatus::Numerical,
                format!("{} run(s) aborted numerically", outcome.aborted),
            ));
        }
        Ok(())
    })
}

/// Generate the planted-layer task for `seed`.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fora_task_new(cfg: *const ForaConfig, seed: u64, out: *mut *mut ForaTask) -> ForaStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let e = c.0.experiment();
        let task = core(fora_core::harness::make_planted_task(e.model, &e.task, seed))?;
        *out = Box::into_raw(Box::new(ForaTask(task)));
        Ok(())
    })
}

/// # Safety
/// `task` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fora_task_free(task: *mut ForaTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Sorted indices of the planted layers.
///
/// # Safety
/// `task` must be a live handle; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn fora_task_planted(
    task: *const ForaTask,
    out: *mut usize,
    cap: usize,
    len: *mut usize,
) -> ForaStatus {
    guard(|| {
        let t = task.as_ref().ok_or_else(|| null("task"))?;
        fill(&t.0.planted, out, cap, len)
    })
}

/// KL(teacher ‖ student base) on the task's eval split.
///
/// # Safety
/// `task` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fora_task_teacher_kl(task: *const ForaTask, out: *mut f64) -> ForaStatus {
    guard(|| {
        let t = task.as_ref().ok_or_else(|| null("task"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = core(t.0.teacher_kl())?;
        Ok(())
    })
}

/// Per-layer Fisher scores of the task's student base, using the configured
/// number of calibration batches and estimator.
///
/// # Safety
/// `cfg` and `task` must be live handles; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn fora_fisher_scores(
    cfg: *const ForaConfig,
    task: *const ForaTask,
    out: *mut f64,
    cap: usize,
    len: *mut usize,
) -> ForaStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let t = task.as_ref().ok_or_else(|| null("task"))?;
        let f = c.0.fisher;
        let scores = core(fora_core::fisher::score_layers(
            &t.0.student_base,
            &t.0.calib,
            f.n_batches,
            f.variant,
            t.0.seed,
        ))?;
        fill(&scores.values(), out, cap, len)
    })
}

/// Indices of the `k` largest of `n` scores, ascending, ties to the lower
/// index. `out` must hold `k` elements.
///
/// # Safety
/// `scores` must hold `n` elements and `out` `k` elements.
#[no_mangle]
pub unsafe extern "C" fn fora_select_topk(scores: *const f64, n: usize, k: usize, out: *mut usize) -> ForaStatus {
    guard(|| {
        if scores.is_null() && n > 0 {
            return Err(null("scores"));
        }
        let values = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(scores, n)
        };
        let ls: Vec<LayerScore> = values
            .iter()
            .enumerate()
            .map(|(layer, &score)| LayerScore { layer, score })
            .collect();
        let sel = core(select_topk(&ls, k))?;
        let mut len = 0;
        fill(sel.layers(), out, k, &mut len)
    })
}

/// Entropy effective rank of a list of singular values.
///
/// # Safety
/// `values` must hold `n` elements and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fora_effective_rank(values: *const f64, n: usize, out: *mut f64) -> ForaStatus {
    guard(|| {
        if values.is_null() && n > 0 {
            return Err(null("values"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let v = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(values, n).to_vec()
        };
        *out = core(effective_rank(&Spectrum::from_values(v)))?;
        Ok(())
    })
}

/// Train one arm (`fora`, `fg_lora`, `stiefel_lora`, `lora_all`,
/// `rank_halved`, `random_k`) on the planted task for `seed`.
///
/// # Safety
/// `cfg` must be a live handle, `arm` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fora_train(
    cfg: *const ForaConfig,
    arm: *const c_char,
    seed: u64,
    out: *mut *mut ForaRun,
) -> ForaStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let name = str_arg(arm, "arm")?;
        let choice = ArmChoice::parse(name).ok_or_else(|| (ForaStatus::Config, format!("unknown arm {name:?}")))?;
        let mut runner = core(Runner::new(c.0.experiment()))?;
        let result = core(runner.run(&choice.arm(&c.0), seed))?;
        if let Some(reason) = &result.aborted {
            return Err((ForaStatus::Numerical, reason.clone()));
        }
        *out = Box::into_raw(Box::new(ForaRun(result)));
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fora_run_free(run: *mut ForaRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Scalar results of a run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ForaRunMetrics {
    pub params: usize,
    pub init_eval_loss: f64,
    pub final_eval_loss: f64,
    pub final_train_loss: f64,
    pub erank_ratio: f64,
    pub kl_drift: f64,
    pub drift_max: f64,
    pub planted_jaccard: f64,
}

/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fora_run_metrics(run: *const ForaRun, out: *mut ForaRunMetrics) -> ForaStatus {
    guard(|| {
        let r = &run.as_ref().ok_or_else(|| null("run"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ForaRunMetrics {
            params: r.params,
            init_eval_loss: r.init_eval_loss,
            final_eval_loss: r.final_eval_loss,
            final_train_loss: r.final_train_loss,
            erank_ratio: r.erank_ratio,
            kl_drift: r.kl_drift,
            drift_max: r.drift_max,
            planted_jaccard: r.planted_jaccard,
        };
        Ok(())
    })
}

/// Per-step training losses.
///
/// # Safety
/// `run` must be a live handle; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn fora_run_losses(run: *const ForaRun, out: *mut f64, cap: usize, len: *mut usize) -> ForaStatus {
    guard(|| {
        let r = &run.as_ref().ok_or_else(|| null("run"))?.0;
        let losses: Vec<f64> = r.records.iter().map(|s| s.loss).collect();
        fill(&losses, out, cap, len)
    })
}

/// Write the run's adapters as a checkpoint plus JSON manifest.
///
/// # Safety
/// `cfg` and `run` must be live handles; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fora_run_save_adapters(
    cfg: *const ForaConfig,
    run: *const ForaRun,
    path: *const c_char,
) -> ForaStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let r = &run.as_ref().ok_or_else(|| null("run"))?.0;
        let path = PathBuf::from(str_arg(path, "path")?);
        let adapters = r
            .adapters
            .as_ref()
            .ok_or_else(|| (ForaStatus::Numerical, "run has no adapters".to_string()))?;
        core(fora_core::checkpoint::save_adapters(
            &path,
            &c.0.model,
            adapters,
            serde_json::json!({ "arm": r.arm, "seed": r.seed }),
        ))?;
        Ok(())
    })
}
