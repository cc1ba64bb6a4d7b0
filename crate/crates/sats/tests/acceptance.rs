//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured evidence. Oracles here are written independently of the
//! library implementation paths they check.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sats::augment::{
    compose_virtual_unknown, extract_unknown_mask, rasterize_polygon, refine_hard_unknown_mask,
    unknown_mixup, Polygon,
};
use sats::datamodel::{BinaryMask, ClassSpace, LabelMap, LabeledImage, ProbMap, IGNORE_INDEX};
use sats::metrics::{compute_report, evaluate, ConfusionMatrix};
use sats::netcore::{
    ema_update, expand_head, forward_trace, supervised_loss_and_grad,
    weighted_target_loss_and_grad, NetworkParams,
};
use sats::pseudolabel::{confidence_weight, open_set_pseudo_label};
use sats::synthbench::{generate_benchmark, BenchConfig};
use sats::trainer::{
    infer_unknowns, run_one_stage_baseline, run_stage1, run_stage2, MaskObservation, StageConfig,
    TrainerHooks,
};

// ---------------------------------------------------------------------------
// Criterion 1: H-Score arithmetic matches the published table rows.
// ---------------------------------------------------------------------------

/// Build a confusion matrix whose common mIoU is exactly `c/10000` and
/// private IoU exactly `p/10000`: two known classes whose only errors are
/// false positives drawn from unknown pixels, sized so the ratios come out
/// as exact rationals.
fn exact_matrix(c: u64, p: u64) -> (ConfusionMatrix, ClassSpace) {
    let cs = ClassSpace::new(2, 1).unwrap();
    let mut cm = ConfusionMatrix::new(&cs);
    let total = (10_000 - p) as usize; // split across the two known classes
    let (a, b) = (total / 2, total - total / 2);
    let mut tally = |gt: u8, pred: u8, count: u64| {
        if count == 0 {
            return;
        }
        // One wide row per (gt, pred) pair keeps accumulation cheap.
        let gt_map = LabelMap::new(count as usize, 1, gt);
        let pred_map = LabelMap::new(count as usize, 1, pred);
        cm.accumulate(&gt_map, &pred_map).unwrap();
    };
    for (known, weight) in [(0u8, a as u64), (1u8, b as u64)] {
        tally(known, known, c * weight); // true positives
        tally(2, known, (10_000 - c) * weight); // unknown misread as known
    }
    tally(2, 2, p * (10_000 - c)); // unknown true positives
    (cm, cs)
}

#[test]
fn criterion_1_h_score_oracle() {
    let (cm, cs) = exact_matrix(7357, 6093);
    let report = compute_report(&cm, &cs);
    assert!((report.common_miou - 0.7357).abs() < 1e-12);
    assert!((report.private_iou - 0.6093).abs() < 1e-12);
    let h1 = report.h_score * 100.0;
    assert!((h1 - 66.66).abs() < 0.01, "h {h1}");

    let (cm, cs) = exact_matrix(7247, 5542);
    let report = compute_report(&cm, &cs);
    assert!((report.common_miou - 0.7247).abs() < 1e-12);
    assert!((report.private_iou - 0.5542).abs() < 1e-12);
    let h2 = report.h_score * 100.0;
    assert!((h2 - 62.81).abs() < 0.01, "h {h2}");

    println!("criterion 1 PASS: compute_report h-scores {h1:.4} and {h2:.4} match 66.66/62.81 within 0.01");
}

// ---------------------------------------------------------------------------
// Criterion 2: scanline rasterization vs brute-force even-odd oracle.
// ---------------------------------------------------------------------------

/// Independent even-odd point-in-polygon test at a pixel center: count edge
/// crossings strictly to the right of the point.
fn oracle_inside(vertices: &[(i64, i64)], px: f64, py: f64) -> bool {
    let n = vertices.len();
    let mut crossings = 0;
    for i in 0..n {
        let (x1, y1) = vertices[i];
        let (x2, y2) = vertices[(i + 1) % n];
        let (y1f, y2f) = (y1 as f64, y2 as f64);
        if (y1f > py) != (y2f > py) {
            let t = (py - y1f) / (y2f - y1f);
            if x1 as f64 + t * (x2 - x1) as f64 > px {
                crossings += 1;
            }
        }
    }
    crossings % 2 == 1
}

#[test]
fn criterion_2_rasterization_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut degenerate = 0usize;
    for case in 0..1000 {
        let h = rng.random_range(4..=64usize);
        let w = rng.random_range(4..=64usize);
        let vertices: Vec<(i64, i64)> = if case % 10 == 0 {
            // Degenerate: collinear points on a random line (zero area).
            degenerate += 1;
            let n = rng.random_range(3..=6);
            let (x0, y0) = (rng.random_range(0..w as i64), rng.random_range(0..h as i64));
            let (dx, dy) = (rng.random_range(-2..=2i64), rng.random_range(-2..=2i64));
            (0..n)
                .map(|k| {
                    (
                        (x0 + k * dx).clamp(0, w as i64 - 1),
                        (y0 + k * dy).clamp(0, h as i64 - 1),
                    )
                })
                .collect()
        } else {
            let n = rng.random_range(3..=10);
            (0..n)
                .map(|_| (rng.random_range(0..w as i64), rng.random_range(0..h as i64)))
                .collect()
        };
        let mask = rasterize_polygon(&Polygon::new(vertices.clone()).unwrap(), h, w);
        for y in 0..h {
            for x in 0..w {
                let expected = oracle_inside(&vertices, x as f64 + 0.5, y as f64 + 0.5);
                assert_eq!(
                    mask.at(x, y) == 1,
                    expected,
                    "case {case}: mismatch at ({x},{y}) for {vertices:?}"
                );
            }
        }
    }
    assert!(degenerate >= 50);
    println!("criterion 2 PASS: 1000 polygons pixel-exact vs brute-force oracle ({degenerate} degenerate)");
}

// ---------------------------------------------------------------------------
// Criterion 3: analytic gradients vs central finite differences.
// ---------------------------------------------------------------------------

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LabeledImage {
    let mut img = LabeledImage::filled(w, h, [0, 0, 0], 0);
    for px in img.pixels.iter_mut() {
        *px = rng.random_range(0..=255u32) as u8;
    }
    img
}

fn random_label(rng: &mut ChaCha8Rng, w: usize, h: usize, channels: usize) -> LabelMap {
    let values = (0..w * h)
        .map(|_| {
            if rng.random_range(0..6u32) == 0 {
                IGNORE_INDEX
            } else {
                rng.random_range(0..channels as u32) as u8
            }
        })
        .collect();
    LabelMap::from_values(values, w, h).unwrap()
}

#[test]
fn criterion_3_gradient_correctness() {
    let eps = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(0x96ad);
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for (expanded, weight) in [(false, 1.0), (true, 1.0), (false, 0.7), (true, 0.7)] {
        for instance in 0..2 {
            let base = NetworkParams::init(3, 1000 + instance + u64::from(expanded));
            let params = if expanded { expand_head(&base).unwrap() } else { base };
            let img = random_image(&mut rng, 10, 10, );
            let label = random_label(&mut rng, 10, 10, params.head_channels());
            let loss_fn = |p: &NetworkParams| -> f64 {
                weighted_target_loss_and_grad(p, &img, &label, weight).unwrap().0
            };
            let (_, grads) = weighted_target_loss_and_grad(&params, &img, &label, weight).unwrap();

            for tensor_idx in 0..8 {
                let len = grads.tensors()[tensor_idx].0.len();
                for _ in 0..2 {
                    let k = rng.random_range(0..len);
                    let mut plus = params.clone();
                    plus.tensors_mut()[tensor_idx].0[k] += eps;
                    let mut minus = params.clone();
                    minus.tensors_mut()[tensor_idx].0[k] -= eps;
                    let numeric = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * eps);
                    let analytic = grads.tensors()[tensor_idx].0[k];
                    let rel = (analytic - numeric).abs()
                        / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        rel < 1e-4,
                        "tensor {tensor_idx}[{k}] (expanded={expanded}, q={weight}): \
                         analytic {analytic:.3e} vs numeric {numeric:.3e}, rel {rel:.3e}"
                    );
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
    }
    // Also the plain supervised entry point.
    let params = expand_head(&NetworkParams::init(3, 77)).unwrap();
    let img = random_image(&mut rng, 10, 10);
    let label = random_label(&mut rng, 10, 10, params.head_channels());
    let (_, grads) = supervised_loss_and_grad(&params, &img, &label).unwrap();
    for tensor_idx in 0..8 {
        let len = grads.tensors()[tensor_idx].0.len();
        for _ in 0..2 {
            let k = rng.random_range(0..len);
            let mut plus = params.clone();
            plus.tensors_mut()[tensor_idx].0[k] += eps;
            let mut minus = params.clone();
            minus.tensors_mut()[tensor_idx].0[k] -= eps;
            let numeric = (supervised_loss_and_grad(&plus, &img, &label).unwrap().0
                - supervised_loss_and_grad(&minus, &img, &label).unwrap().0)
                / (2.0 * eps);
            let analytic = grads.tensors()[tensor_idx].0[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "supervised tensor {tensor_idx}[{k}]: rel {rel:.3e}");
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} parameters checked");
    println!(
        "criterion 3 PASS: {checked} parameters checked, worst relative error {worst:.3e} < 1e-4"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: equation-exactness property suite, 1000 cases per family.
// ---------------------------------------------------------------------------

fn random_probmap(rng: &mut ChaCha8Rng, channels: usize, w: usize, h: usize) -> ProbMap {
    let n = w * h;
    let mut pm = ProbMap::new(channels, w, h);
    for p in 0..n {
        let mut raw: Vec<f64> = (0..channels).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        for r in raw.iter_mut() {
            *r /= sum;
        }
        for (c, r) in raw.iter().enumerate() {
            pm.probs[c * n + p] = *r;
        }
    }
    pm
}

#[test]
fn criterion_4_equation_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe9);

    // Open-set pseudo-label rule: known-channel argmax with threshold
    // fallback to unknown.
    for case in 0..1000 {
        let k = rng.random_range(2..=5usize);
        let cs = ClassSpace::new(k, 1).unwrap();
        let pm = random_probmap(&mut rng, k + 1, 4, 4);
        let tau1 = rng.random_range(0.05..0.95);
        let label = open_set_pseudo_label(&pm, &cs, tau1).unwrap();
        for p in 0..16 {
            let mut best_c = 0usize;
            let mut best = pm.at(0, p);
            for c in 1..k {
                if pm.at(c, p) > best {
                    best = pm.at(c, p);
                    best_c = c;
                }
            }
            let expected = if best >= tau1 { best_c as u8 } else { cs.unknown_index() };
            assert_eq!(label.values[p], expected, "open-set case {case} pixel {p}");
        }
    }

    // The unknown channel must never win the open-set max: give it the
    // global maximum and keep the known max above threshold.
    for _ in 0..1000 {
        let k = rng.random_range(2..=4usize);
        let cs = ClassSpace::new(k, 1).unwrap();
        let n = 4usize;
        let mut pm = ProbMap::new(k + 1, 2, 2);
        for p in 0..n {
            // unknown gets 0.5, one known gets 0.4, rest share 0.1
            let hot = rng.random_range(0..k);
            for c in 0..k {
                pm.probs[c * n + p] = if c == hot { 0.4 } else { 0.1 / (k - 1) as f64 };
            }
            pm.probs[k * n + p] = 0.5;
        }
        let label = open_set_pseudo_label(&pm, &cs, 0.35).unwrap();
        assert!(label.values.iter().all(|&v| v != cs.unknown_index()));
    }

    // Confidence weight: strict inequality over the full pixel count.
    for case in 0..1000 {
        let k = rng.random_range(2..=4usize);
        let (w, h) = (rng.random_range(2..=5usize), rng.random_range(2..=5usize));
        let mut pm = random_probmap(&mut rng, k + 1, w, h);
        let tau2 = rng.random_range(0.3..0.99);
        // Pin some pixels to exactly tau2 so the boundary is exercised.
        let n = w * h;
        for p in 0..n {
            if rng.random_range(0..4u32) == 0 {
                let rest = (1.0 - tau2) / k as f64;
                for c in 0..=k {
                    pm.probs[c * n + p] = if c == 0 { tau2 } else { rest };
                }
            }
        }
        let q = confidence_weight(&pm, tau2);
        let mut count = 0usize;
        for p in 0..n {
            let mut best = f64::NEG_INFINITY;
            for c in 0..=k {
                best = best.max(pm.at(c, p));
            }
            if best > tau2 {
                count += 1;
            }
        }
        let expected = count as f64 / (w * h) as f64;
        assert_eq!(q, expected, "confidence case {case}");
    }

    // Teacher EMA: exact affine formula for boundary and typical factors.
    for case in 0..250 {
        let teacher = NetworkParams::init(2, 50_000 + case);
        let student = NetworkParams::init(2, 60_000 + case);
        for alpha in [0.0, 0.999, 1.0, rng.random_range(0.0..1.0)] {
            let out = ema_update(&teacher, &student, alpha).unwrap();
            for (((o, _), (t, _)), (s, _)) in out
                .tensors()
                .into_iter()
                .zip(teacher.tensors())
                .zip(student.tensors())
            {
                for i in 0..o.len() {
                    let expected = alpha * t[i] + (1.0 - alpha) * s[i];
                    assert_eq!(o[i], expected, "ema alpha {alpha} case {case}");
                }
            }
        }
    }

    // Virtual-unknown composition: zero-mask identity, full-mask
    // saturation, per-pixel oracle equality.
    let compose_cs = ClassSpace::new(3, 1).unwrap();
    for case in 0..1000 {
        let (w, h) = (rng.random_range(2..=8usize), rng.random_range(2..=8usize));
        let mut src = random_image(&mut rng, w, h);
        for v in src.label.values.iter_mut() {
            *v = match rng.random_range(0..5u32) {
                4 => IGNORE_INDEX,
                c => (c % 3) as u8,
            };
        }
        let mask = match case % 10 {
            0 => BinaryMask::zeros(w, h),
            1 => BinaryMask::ones(w, h),
            _ => BinaryMask {
                bits: (0..w * h).map(|_| rng.random_range(0..=1u8)).collect(),
                width: w,
                height: h,
            },
        };
        let color = [rng.random(), rng.random(), rng.random()];
        let out = compose_virtual_unknown(&src, &mask, color, &compose_cs).unwrap();
        if case % 10 == 0 {
            assert_eq!(out, src, "zero-mask identity, case {case}");
        }
        for p in 0..w * h {
            if mask.bits[p] == 1 {
                assert_eq!(&out.pixels[3 * p..3 * p + 3], &color);
                assert_eq!(out.label.values[p], compose_cs.unknown_index());
            } else {
                assert_eq!(&out.pixels[3 * p..3 * p + 3], &src.pixels[3 * p..3 * p + 3]);
                assert_eq!(out.label.values[p], src.label.values[p]);
            }
        }
    }

    // Unknown mixup: target pixels and the unknown label under the mask,
    // untouched source elsewhere.
    for case in 0..1000 {
        let (w, h) = (rng.random_range(2..=8usize), rng.random_range(2..=8usize));
        let mut src = random_image(&mut rng, w, h);
        for v in src.label.values.iter_mut() {
            *v = match rng.random_range(0..5u32) {
                4 => IGNORE_INDEX,
                c => (c % 3) as u8,
            };
        }
        let target = random_image(&mut rng, w, h);
        let mask = match case % 10 {
            0 => BinaryMask::zeros(w, h),
            1 => BinaryMask::ones(w, h),
            _ => BinaryMask {
                bits: (0..w * h).map(|_| rng.random_range(0..=1u8)).collect(),
                width: w,
                height: h,
            },
        };
        let out = unknown_mixup(&src, &target, &mask, &compose_cs).unwrap();
        if case % 10 == 0 {
            assert_eq!(out, src);
        }
        for p in 0..w * h {
            if mask.bits[p] == 1 {
                assert_eq!(&out.pixels[3 * p..3 * p + 3], &target.pixels[3 * p..3 * p + 3]);
                assert_eq!(out.label.values[p], compose_cs.unknown_index());
            } else {
                assert_eq!(&out.pixels[3 * p..3 * p + 3], &src.pixels[3 * p..3 * p + 3]);
                assert_eq!(out.label.values[p], src.label.values[p]);
            }
        }
    }

    // Unknown-mask extraction.
    for _ in 0..1000 {
        let k = rng.random_range(2..=4usize);
        let cs = ClassSpace::new(k, 1).unwrap();
        let (w, h) = (rng.random_range(2..=8usize), rng.random_range(2..=8usize));
        let values: Vec<u8> = (0..w * h)
            .map(|_| rng.random_range(0..=k as u32) as u8)
            .collect();
        let pred = LabelMap::from_values(values.clone(), w, h).unwrap();
        let mask = extract_unknown_mask(&pred, &cs);
        for (bit, value) in mask.bits.iter().zip(&values) {
            assert_eq!(*bit == 1, *value == cs.unknown_index());
        }
    }

    // Hard-unknown refinement: full three-branch truth table.
    for case in 0..1000 {
        let k = rng.random_range(2..=5usize);
        let head: Vec<u8> = (0..k as u8).filter(|_| rng.random_range(0..2u32) == 0).collect();
        let cs = ClassSpace::new(k, 1).unwrap().with_head_classes(head.clone()).unwrap();
        let unk = cs.unknown_index();
        let (w, h) = (rng.random_range(2..=8usize), rng.random_range(2..=8usize));
        let sample = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..w * h)
                .map(|_| match rng.random_range(0..8u32) {
                    7 => IGNORE_INDEX,
                    v => (v % (k as u32 + 1)) as u8,
                })
                .collect()
        };
        let s1 = LabelMap::from_values(sample(&mut rng), w, h).unwrap();
        let s2 = LabelMap::from_values(sample(&mut rng), w, h).unwrap();
        let mask = refine_hard_unknown_mask(&s1, &s2, &cs).unwrap();
        for p in 0..w * h {
            let expected = s1.values[p] == unk
                || (s2.values[p] == unk && head.contains(&s1.values[p]));
            assert_eq!(mask.bits[p] == 1, expected, "refine case {case} pixel {p}");
        }
    }

    println!("criterion 4 PASS: 1000-case property suites for the labeling, weighting, EMA, composition, and refinement rules");
}

// ---------------------------------------------------------------------------
// Criterion 5: head expansion preserves known-class logits bit-exactly.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_head_expansion_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0dd);
    for net in 0..100 {
        let k = rng.random_range(2..=5usize);
        let params = NetworkParams::init(k, 7000 + net);
        let expanded = expand_head(&params).unwrap();
        let img = random_image(&mut rng, 8, 8);
        let narrow = forward_trace(&params, &img).unwrap();
        let wide = forward_trace(&expanded, &img).unwrap();
        let n = 64;
        for c in 0..k {
            assert_eq!(
                &narrow.logits[c * n..(c + 1) * n],
                &wide.logits[c * n..(c + 1) * n],
                "net {net} class {c}"
            );
        }
    }
    println!("criterion 5 PASS: known-class logits bit-identical across expansion on 100 random nets");
}

// ---------------------------------------------------------------------------
// Criterion 6: directional toy experiment over 3 seeds.
// ---------------------------------------------------------------------------

struct Scores {
    common: f64,
    private: f64,
    h: f64,
}

fn scores(report: &sats::metrics::MetricsReport) -> Scores {
    Scores {
        common: report.common_miou * 100.0,
        private: report.private_iou * 100.0,
        h: report.h_score * 100.0,
    }
}

#[test]
fn criterion_6_directional_toy_experiment() {
    let seeds = [1u64, 2, 3];
    let mut a_priv = 0.0;
    let mut a_h = 0.0;
    let mut b_h = 0.0;
    let mut c_h = 0.0;
    let mut c_priv = 0.0;
    let mut d_priv = 0.0;
    let mut d_h = 0.0;
    let mut detector_coverage_ok = true;

    for &seed in &seeds {
        let bench = BenchConfig {
            seed,
            ..Default::default()
        };
        let (source, target_train, target_val) = generate_benchmark(&bench).unwrap();
        let cfg = StageConfig {
            seed,
            ..Default::default()
        };
        assert_eq!(cfg.iterations, 4000);
        assert_eq!(bench.image_size, 64);
        assert_eq!(bench.num_known, 3);
        assert_eq!(bench.num_private, 2);
        assert_eq!(bench.train_per_domain, 200);

        let a = run_one_stage_baseline(&cfg, &source, &target_train, &mut TrainerHooks::default())
            .unwrap();
        let ra = scores(&evaluate(&a.params, &target_val).unwrap());

        let b = run_stage1(&cfg, &source, &target_train, &mut TrainerHooks::default()).unwrap();
        let rb = scores(&evaluate(&b.params, &target_val).unwrap());

        let d_t_unk = infer_unknowns(&b.params, &target_train).unwrap();
        let unk = source.class_space.unknown_index();
        let covered = d_t_unk
            .items
            .iter()
            .filter(|i| i.label.values.contains(&unk))
            .count();
        detector_coverage_ok &= covered * 10 >= d_t_unk.len() * 8;

        let mut cfg_c = cfg.clone();
        cfg_c.pretrain_steps = cfg_c.iterations;
        let c = run_stage2(&cfg_c, &source, &target_train, &d_t_unk, None, &mut TrainerHooks::default())
            .unwrap();
        let rc = scores(&evaluate(&c.params, &target_val).unwrap());

        let d = run_stage2(&cfg, &source, &target_train, &d_t_unk, None, &mut TrainerHooks::default())
            .unwrap();
        let rd = scores(&evaluate(&d.params, &target_val).unwrap());

        println!(
            "seed {seed}: A(common {:.2} priv {:.2} h {:.2}) B(h {:.2}) C(priv {:.2} h {:.2}) D(priv {:.2} h {:.2}) detector coverage {covered}/{}",
            ra.common, ra.private, ra.h, rb.h, rc.private, rc.h, rd.private, rd.h, d_t_unk.len()
        );

        a_priv += ra.private / 3.0;
        a_h += ra.h / 3.0;
        b_h += rb.h / 3.0;
        c_h += rc.h / 3.0;
        c_priv += rc.private / 3.0;
        d_priv += rd.private / 3.0;
        d_h += rd.h / 3.0;
    }

    println!(
        "means: A(priv {a_priv:.2} h {a_h:.2}) B(h {b_h:.2}) C(priv {c_priv:.2} h {c_h:.2}) D(priv {d_priv:.2} h {d_h:.2})"
    );

    // (a) full pipeline beats the one-stage baseline by at least 5 H-Score
    // points with strictly higher private IoU.
    assert!(d_priv > a_priv, "D private {d_priv:.2} not above A {a_priv:.2}");
    assert!(
        d_h - a_h >= 5.0,
        "D h {d_h:.2} not 5 points above A {a_h:.2}"
    );
    // (b) stage-two self-training does not reduce H-Score vs the detector.
    assert!(c_h >= b_h - 1e-9, "C h {c_h:.2} below B {b_h:.2}");
    // (c) hard-unknown exploration does not reduce private IoU.
    assert!(
        d_priv >= c_priv - 1e-9,
        "D private {d_priv:.2} below C {c_priv:.2}"
    );
    // Detector coverage backs the stage-one contract.
    assert!(detector_coverage_ok, "detector marked unknowns in fewer than 80% of images");

    println!(
        "criterion 6 PASS: D-A h margin {:.2} >= 5, C >= B, D private >= C private, over seeds {seeds:?}",
        d_h - a_h
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: command-level determinism, bitwise modulo timestamps.
// ---------------------------------------------------------------------------

/// Collect every file under `root` as (relative path, bytes), with wall-time
/// columns stripped from training logs.
fn snapshot(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let mut bytes = std::fs::read(&path).unwrap();
                if rel.ends_with("_log.csv") {
                    // The wall-clock column is the one permitted difference.
                    let text = String::from_utf8(bytes).unwrap();
                    bytes = text
                        .lines()
                        .map(|line| line.rsplit_once(',').map(|(a, _)| a).unwrap_or(line))
                        .collect::<Vec<_>>()
                        .join("\n")
                        .into_bytes();
                }
                out.push((rel, bytes));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn criterion_7_command_determinism() {
    let bin = env!("CARGO_BIN_EXE_sats");
    let work = tempfile::tempdir().unwrap();
    let config = work.path().join("toy.conf");
    std::fs::write(
        &config,
        "seed = 5\nimage_size = 32\ntrain_per_domain = 10\nval_count = 5\n\
         iterations = 25\npretrain_steps = 5\ncrop_size = 32\nlog_every = 0\n",
    )
    .unwrap();

    let run = |args: &[&str]| {
        let status = std::process::Command::new(bin)
            .args(args)
            .current_dir(work.path())
            .env("SATS_THREADS", "2")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::inherit())
            .status()
            .unwrap();
        assert!(status.success(), "command failed: {args:?}");
    };

    for round in ["r1", "r2"] {
        let data = format!("{round}/data");
        let out = format!("{round}/out");
        let conf = config.to_str().unwrap();
        run(&["gen-data", "--config", conf, "--data", &data, "--out", &out]);
        run(&["train", "stage1", "--config", conf, "--data", &data, "--out", &out]);
        run(&["infer-unk", "--config", conf, "--data", &data, "--out", &out]);
        run(&["train", "baseline", "--config", conf, "--data", &data, "--out", &out]);
        let stage1 = format!("{out}/stage1.ckpt");
        run(&[
            "eval", "--config", conf, "--data", &data, "--out", &out, "--checkpoint", &stage1,
        ]);
    }

    let first = snapshot(&work.path().join("r1"));
    let second = snapshot(&work.path().join("r2"));
    assert_eq!(first.len(), second.len());
    let mut files = 0usize;
    for ((name_a, bytes_a), (name_b, bytes_b)) in first.iter().zip(&second) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "file {name_a} differs between identical runs");
        files += 1;
    }
    println!("criterion 7 PASS: {files} output files bitwise identical across repeated commands");
}

// ---------------------------------------------------------------------------
// Criterion 8: refinement monotonicity over a trained run.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_refinement_monotonicity() {
    let bench = BenchConfig {
        image_size: 32,
        train_per_domain: 16,
        val_count: 4,
        seed: 8,
        ..Default::default()
    };
    let (source, target_train, _) = generate_benchmark(&bench).unwrap();
    let cfg = StageConfig {
        iterations: 120,
        pretrain_steps: 20,
        crop_size: 32,
        seed: 8,
        ..Default::default()
    };
    let stage1 = run_stage1(&cfg, &source, &target_train, &mut TrainerHooks::default()).unwrap();
    let d_t_unk = infer_unknowns(&stage1.params, &target_train).unwrap();

    let mut checked = 0usize;
    let mut superset = true;
    {
        let mut hooks = TrainerHooks {
            on_mixup_mask: Some(Box::new(|obs: MaskObservation<'_>| {
                if let Some(refined) = obs.refined {
                    checked += 1;
                    superset &= refined.is_superset_of(obs.base);
                }
            })),
            ..Default::default()
        };
        run_stage2(&cfg, &source, &target_train, &d_t_unk, None, &mut hooks).unwrap();
    }
    assert!(checked >= 100, "only {checked} refined masks observed");
    assert!(superset, "a refined mask dropped pixels from its base mask");
    println!("criterion 8 PASS: {checked} refined masks, all pointwise supersets of their base masks");
}
