// Runs any subset of the four ablation configurations on the default
// benchmark and prints their metrics:
//   A  one-stage head-expansion baseline
//   B  stage one (virtual unknowns), evaluated directly
//   C  stage two, pre-training phase only
//   D  full stage two with hard-unknown refinement
//
// Usage: ablation [seed] [iterations] [hue_offset] [pretrain] [configs] [reinit]
// where configs is a subset of "ABCD" (stage one always runs when C or D
// needs its detector) and reinit chooses whether stage two restarts from
// fresh parameters (1, default) or continues from the detector (0).
use std::time::Instant;

use sats::metrics::evaluate;
use sats::synthbench::{generate_benchmark, BenchConfig};
use sats::trainer::{
    infer_unknowns, run_one_stage_baseline, run_stage1, run_stage2, StageConfig, TrainerHooks,
};

fn main() {
    let arg = |n: usize| std::env::args().nth(n);
    let seed: u64 = arg(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let iterations: usize = arg(2).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let hue_offset: f64 = arg(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| BenchConfig::default().private_hue_offset_deg);
    let pretrain: usize = arg(4).and_then(|s| s.parse().ok()).unwrap_or(200);
    let configs: String = arg(5).unwrap_or_else(|| "ABCD".into());
    let reinit: bool = arg(6).map(|s| s != "0").unwrap_or(true);
    println!(
        "seed {seed}, iterations {iterations}, hue offset {hue_offset}, pretrain {pretrain}, configs {configs}, reinit {reinit}"
    );

    let bench = BenchConfig {
        seed,
        private_hue_offset_deg: hue_offset,
        ..Default::default()
    };
    let (source, target_train, target_val) = generate_benchmark(&bench).unwrap();
    let cfg = StageConfig {
        iterations,
        pretrain_steps: pretrain.min(iterations),
        seed,
        log_every: 1000,
        reinit_student_for_stage2: reinit,
        ..Default::default()
    };
    let t0 = Instant::now();
    let report = |tag: &str, r: &sats::metrics::MetricsReport, t0: &Instant| {
        println!(
            "{tag}: common {:.2} private {:.2} h {:.2}  ({:.0}s)",
            r.common_miou * 100.0,
            r.private_iou * 100.0,
            r.h_score * 100.0,
            t0.elapsed().as_secs_f64()
        );
    };

    if configs.contains('A') {
        let a = run_one_stage_baseline(&cfg, &source, &target_train, &mut TrainerHooks::default())
            .unwrap();
        report("A baseline", &evaluate(&a.params, &target_val).unwrap(), &t0);
    }

    if configs.contains('B') || configs.contains('C') || configs.contains('D') {
        let b = run_stage1(&cfg, &source, &target_train, &mut TrainerHooks::default()).unwrap();
        if configs.contains('B') {
            report("B stage1  ", &evaluate(&b.params, &target_val).unwrap(), &t0);
        }
        let d_t_unk = infer_unknowns(&b.params, &target_train).unwrap();
        let unk = source.class_space.unknown_index();
        let with_unk = d_t_unk
            .items
            .iter()
            .filter(|i| i.label.values.contains(&unk))
            .count();
        let unk_frac: f64 = d_t_unk
            .items
            .iter()
            .map(|i| i.label.count(unk) as f64 / (i.width * i.height) as f64)
            .sum::<f64>()
            / d_t_unk.len() as f64;
        println!(
            "detector: {}/{} images with unknowns, mean unknown fraction {:.3}",
            with_unk,
            d_t_unk.len(),
            unk_frac
        );

        let init = (!reinit).then_some(&b.params);
        if configs.contains('C') {
            let mut cfg_c = cfg.clone();
            cfg_c.pretrain_steps = cfg_c.iterations;
            let c = run_stage2(&cfg_c, &source, &target_train, &d_t_unk, init, &mut TrainerHooks::default())
                .unwrap();
            report("C stage2-A", &evaluate(&c.params, &target_val).unwrap(), &t0);
        }
        if configs.contains('D') {
            let d = run_stage2(&cfg, &source, &target_train, &d_t_unk, init, &mut TrainerHooks::default())
                .unwrap();
            report("D stage2  ", &evaluate(&d.params, &target_val).unwrap(), &t0);
        }
    }
}
