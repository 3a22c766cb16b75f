use std::sync::OnceLock;

use fora_core::fisher::{jaccard, score_layers};
use fora_core::harness::{make_planted_task, run_ablation_2x2, ExperimentConfig, ProtocolTable, Runner};

/// 2x2 ablation on the planted task, 100 steps, seeds 0..3.
fn ablation_100_steps() -> &'static ProtocolTable {
    static TABLE: OnceLock<ProtocolTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut cfg = ExperimentConfig::default();
        cfg.train.steps = 100;
        let mut runner = Runner::new(cfg).unwrap();
        run_ablation_2x2(&mut runner, &[0, 1, 2]).unwrap()
    })
}

#[test]
fn every_ablation_arm_reduces_loss_in_100_steps() {
    let table = ablation_100_steps();
    assert_eq!(table.n_aborted(), 0);
    for arm in &table.arms {
        let init: Vec<f64> = table.runs.iter().filter(|r| r.arm == arm.arm).map(|r| r.init_eval_loss).collect();
        let init = fora_core::harness::median(&init);
        assert!(
            arm.loss_median < init,
            "{}: median eval loss {} did not fall below init {}",
            arm.arm,
            arm.loss_median,
            init
        );
    }
}

#[test]
fn constrained_adapters_have_flatter_spectra() {
    let table = ablation_100_steps();
    let tail = |name: &str| table.arms.iter().find(|a| a.arm == name).unwrap().tail_ratio_median;
    assert!(tail("stiefel_lora") > tail("lora_all"), "{} vs {}", tail("stiefel_lora"), tail("lora_all"));
    assert!(tail("fora") > tail("fg_lora"), "{} vs {}", tail("fora"), tail("fg_lora"));
}

#[test]
fn selection_is_stable_across_disjoint_calibration_halves() {
    let cfg = ExperimentConfig::default();
    let mut report = Vec::new();
    for seed in 0..5u64 {
        let task = make_planted_task(cfg.model, &cfg.task, seed).unwrap();
        let half = task.calib.len() / 2;
        let pick = |batches: &[fora_core::model::Batch]| {
            score_layers(&task.student_base, batches, half, cfg.fisher.variant, seed)
                .unwrap()
                .select(cfg.k)
                .unwrap()
        };
        let a = pick(&task.calib[..half]);
        let b = pick(&task.calib[half..]);
        report.push((seed, a.layers().to_vec(), b.layers().to_vec(), jaccard(a.layers(), b.layers())));
    }
    assert!(report.iter().all(|r| r.3 >= 0.75), "{report:?}");
}
