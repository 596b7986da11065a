//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use trajscope_core::detector::{composite_features, path_score, quantile, rebound_score, softmax};
use trajscope_core::evidence::{step_evidence, EvidenceSample, EvidenceTrajectory};
use trajscope_core::reference::reference_loss_and_grads;
use trajscope_core::train::{run_two_stage, RunReport, Splits, TrainOutcome};
use trajscope_core::trajectory::{entropy_from_logits, token_entropy};
use trajscope_core::*;

const SIM_SEED: u64 = 20_240_611;
const REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_secs: f64) -> bool {
    elapsed.as_secs_f64() < budget_secs
}

// ---------------------------------------------------------------- entropy

fn entropy_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for n in 1..=2048usize {
        let p = vec![1.0 / n as f64; n];
        worst = worst.max((token_entropy(&p) - (n as f64).ln()).abs());
        worst = worst.max((entropy_from_logits(&vec![0.37; n]) - (n as f64).ln()).abs());
        let mut point = vec![0.0; n];
        point[n / 2] = 1.0;
        worst = worst.max(token_entropy(&point).abs());
    }
    let el = t.elapsed();
    outcome(worst <= 1e-12 && within(el, 1.0), format!("max error {worst:.2e}, {el:.2?}"))
}

// --------------------------------------------------------------- evidence

fn sorted_oracle(values: &[f64], k: usize) -> [f64; 3] {
    if values.is_empty() {
        return [0.0; 3];
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let take = k.min(sorted.len());
    let mut top = 0.0;
    for v in &sorted[..take] {
        top += v;
    }
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let max = sorted[0];
    let topk = (top / take as f64).min(max);
    [(sum / values.len() as f64).min(topk), max, topk]
}

fn evidence_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut order_violations = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(0..80);
        let k = rng.random_range(1..12);
        let coarse = rng.random_bool(0.3);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..10.0);
                if coarse {
                    (v * 2.0).round() / 2.0
                } else {
                    v
                }
            })
            .collect();
        let got = step_evidence(&values, k).to_array();
        if got != sorted_oracle(&values, k) {
            mismatches += 1;
        }
        if !(got[0] <= got[2] && got[2] <= got[1]) {
            order_violations += 1;
        }
    }
    let el = t.elapsed();
    outcome(
        mismatches == 0 && order_violations == 0 && within(el, 10.0),
        format!("{mismatches} mismatches, {order_violations} ordering violations in 10000, {el:.2?}"),
    )
}

// -------------------------------------------------------------- gradients

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random_trajectory(rng: &mut ChaCha8Rng, steps: usize) -> EvidenceTrajectory {
    let arrays: Vec<[f64; 3]> = (0..steps)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..3.0);
            let x = m + rng.random_range(0.5..2.0);
            [m, x, (m + x) / 2.0 + rng.random_range(-0.1..0.1)]
        })
        .collect();
    EvidenceTrajectory::from_arrays(&arrays)
}

fn reference_gradient_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_q = rng.random_range(1..5);
    let steps = rng.random_range(3..7);
    let mut gen = ReferenceGenerator::new(d_q, 4, 8, seed);
    // the final layer starts at zero; randomise it so every layer carries gradient
    for w in gen.net.layers.last_mut().unwrap().weights.iter_mut() {
        *w = rng.random_range(-0.5..0.5);
    }
    let samples: Vec<EvidenceSample> = (0..3)
        .map(|i| EvidenceSample {
            id: format!("g{i}"),
            query: (0..d_q).map(|_| rng.random_range(-1.0..1.0)).collect(),
            evidence: random_trajectory(&mut rng, steps),
            label: Label::Factual,
        })
        .collect();
    let batch: Vec<&EvidenceSample> = samples.iter().collect();
    let (_, grads) = reference_loss_and_grads(&gen, &batch).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = gen.clone();
            plus.net.params_mut()[i][j] += FD_STEP;
            let mut minus = gen.clone();
            minus.net.params_mut()[i][j] -= FD_STEP;
            let lp = reference_loss_and_grads(&plus, &batch).unwrap().0;
            let lm = reference_loss_and_grads(&minus, &batch).unwrap().0;
            analytic.push(g[j]);
            numeric.push((lp - lm) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

fn objective_gradient_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = DetectorConfig {
        hidden: rng.random_range(3..8),
        attn_dim: rng.random_range(2..6),
        head_hidden: rng.random_range(2..6),
        ..DetectorConfig::default()
    };
    let mut det = DeviationDetector::new(config, seed).unwrap();
    // fresh biases are zero, which can park a ReLU exactly on its kink
    for p in det.params_mut() {
        for x in p.iter_mut() {
            *x = rng.random_range(-0.6..0.6);
        }
    }
    let steps = rng.random_range(2..6);
    let samples: Vec<PreparedSample> = (0..4)
        .map(|i| {
            let obs = random_trajectory(&mut rng, steps);
            let reference = random_trajectory(&mut rng, steps);
            PreparedSample::new(&obs, &reference, Some((i % 2) as f64)).unwrap()
        })
        .collect();
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let margins = Margins {
        path: rng.random_range(0.5..4.0),
        rebound: rng.random_range(0.05..1.0),
    };
    let (l1, l2) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
    let (_, grads) = det.objective(&batch, margins, l1, l2).unwrap();
    let total = |d: &DeviationDetector| d.objective(&batch, margins, l1, l2).unwrap().0.total;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = det.clone();
            plus.params_mut()[i][j] += FD_STEP;
            let mut minus = det.clone();
            minus.params_mut()[i][j] -= FD_STEP;
            analytic.push(g[j]);
            numeric.push((total(&plus) - total(&minus)) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reference: Vec<f64> = (0..20).map(|s| reference_gradient_instance(100 + s)).collect();
    let objective: Vec<f64> = (0..20).map(|s| objective_gradient_instance(200 + s)).collect();
    let worst_ref = reference.iter().copied().fold(0.0, f64::max);
    let worst_obj = objective.iter().copied().fold(0.0, f64::max);
    let el = t.elapsed();
    outcome(
        worst_ref < REL_TOL && worst_obj < REL_TOL && within(el, 30.0),
        format!("20+20 instances, worst rel. error reference {worst_ref:.2e}, objective {worst_obj:.2e}, {el:.2?}"),
    )
}

// -------------------------------------------------------------- attention

fn attention_contract() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for _ in 0..2000 {
        let n = rng.random_range(1..40);
        let spread = [1.0, 50.0, 800.0][rng.random_range(0..3)];
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
        let w = softmax(&u);
        let sum: f64 = w.iter().sum();
        ok &= w.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-9;
        let c = rng.random_range(-100.0..100.0);
        let shifted = softmax(&u.iter().map(|x| x + c).collect::<Vec<_>>());
        ok &= w.iter().zip(&shifted).all(|(a, b)| (a - b).abs() <= 1e-12);
    }
    ok &= softmax(&[3.7]) == vec![1.0];
    let det = DeviationDetector::new(DetectorConfig::default(), 5).unwrap();
    let one = EvidenceTrajectory::from_arrays(&[[1.0, 2.0, 1.5]]);
    let pass = det.forward(&PreparedSample::new(&one, &one, None).unwrap()).unwrap();
    ok &= pass.weights == vec![1.0];
    let el = t.elapsed();
    outcome(ok && within(el, 1.0), format!("2000 random score vectors and a one-step detector, {el:.2?}"))
}

// ----------------------------------------------------------------- scores

fn monotone_trajectory(rng: &mut ChaCha8Rng, steps: usize) -> Vec<[f64; 3]> {
    let mut cur = [rng.random_range(3.0..5.0), rng.random_range(5.0..7.0), rng.random_range(4.0..6.0)];
    (0..steps)
        .map(|_| {
            let out = cur;
            for c in cur.iter_mut() {
                *c -= rng.random_range(0.0..0.3);
            }
            out
        })
        .collect()
}

fn positive_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    softmax(&(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
}

fn score_axioms() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for _ in 0..500 {
        let steps = rng.random_range(2..20);
        let w = positive_weights(&mut rng, steps);
        let obs = random_trajectory(&mut rng, steps);

        let same = composite_features(&obs, &obs).unwrap();
        if path_score(&same, &w).unwrap() != 0.0 {
            failures.push("path nonzero on identical trajectories");
        }
        let mut moved = obs.as_arrays();
        let (j, d) = (rng.random_range(0..steps), rng.random_range(0..3));
        moved[j][d] += rng.random_range(0.01..1.0);
        let moved = EvidenceTrajectory::from_arrays(&moved);
        let gap = composite_features(&moved, &obs).unwrap();
        let sp = path_score(&gap, &w).unwrap();
        if sp <= 0.0 {
            failures.push("path zero on differing trajectories");
        }
        let c = rng.random_range(0.1..5.0);
        let scale = |tr: &EvidenceTrajectory| {
            EvidenceTrajectory::from_arrays(&tr.as_arrays().iter().map(|a| a.map(|x| c * x)).collect::<Vec<_>>())
        };
        let scaled = path_score(&composite_features(&scale(&moved), &scale(&obs)).unwrap(), &w).unwrap();
        if (scaled - c * sp).abs() > 1e-10 * (1.0 + c * sp) {
            failures.push("path not homogeneous of degree 1");
        }

        let mono = EvidenceTrajectory::from_arrays(&monotone_trajectory(&mut rng, steps));
        if rebound_score(&mono, &w).unwrap() != 0.0 {
            failures.push("rebound nonzero on monotone trajectory");
        }
        let mut bumped = mono.as_arrays();
        let j = rng.random_range(1..steps);
        bumped[j][rng.random_range(0..3)] += rng.random_range(0.5..1.5);
        let bumped = EvidenceTrajectory::from_arrays(&bumped);
        let sr = rebound_score(&bumped, &w).unwrap();
        if sr <= 0.0 {
            failures.push("rebound zero on a rising trajectory");
        }
        let sr_scaled = rebound_score(&scale(&bumped), &w).unwrap();
        if (sr_scaled - c * c * sr).abs() > 1e-10 * (1.0 + c * c * sr) {
            failures.push("rebound not homogeneous of degree 2");
        }
        let sr_any = rebound_score(&obs, &w).unwrap();
        let rises = obs.vectors.windows(2).any(|p| {
            let (a, b) = (p[0].to_array(), p[1].to_array());
            (0..3).any(|d| b[d] > a[d])
        });
        if (sr_any > 0.0) != rises {
            failures.push("rebound positivity does not match presence of a rise");
        }
    }
    failures.sort_unstable();
    failures.dedup();
    let el = t.elapsed();
    let detail = if failures.is_empty() {
        format!("500 random cases, {el:.2?}")
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty() && within(el, 1.0), detail)
}

// ---------------------------------------------------------------- margins

fn type7_quantile(values: &[f64], level: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn margin_dynamics() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = |beta| DetectorConfig {
        beta,
        ..DetectorConfig::default()
    };
    let mut one = DeviationDetector::new(cfg(1.0), 0).unwrap();
    let mut exact = true;
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
        one.update_margins(&p, &r);
        exact &= (one.margins.path - type7_quantile(&p, 0.9)).abs() < 1e-12;
        exact &= (one.margins.rebound - type7_quantile(&r, 0.9)).abs() < 1e-12;
        exact &= quantile(&p, 0.9).unwrap() == one.margins.path;
    }
    // Stream of N(2, 0.5) path scores and U(0, 2) rebound scores, 256 per batch.
    let mut ema = DeviationDetector::new(cfg(0.1), 0).unwrap();
    for _ in 0..500 {
        let p: Vec<f64> = (0..256)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                2.0 + 0.5 * z
            })
            .collect();
        let r: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..2.0)).collect();
        ema.update_margins(&p, &r);
    }
    // 0.9 quantile of the standard normal
    let (pop_path, pop_reb) = (2.0 + 0.5 * 1.281_551_565_544_600_5, 1.8);
    let (ep, er) = ((ema.margins.path - pop_path).abs(), (ema.margins.rebound - pop_reb).abs());
    let el = t.elapsed();
    outcome(
        exact && ep <= 0.05 && er <= 0.05 && within(el, 5.0),
        format!("beta=1 exact: {exact}; after 500 updates |error| path {ep:.4}, rebound {er:.4}, {el:.2?}"),
    )
}

// -------------------------------------------------------- trained models

fn default_data() -> Dataset {
    simulate_dataset(&SimConfig::default_suite(), SIM_SEED).unwrap()
}

fn train(config: &TrainConfig, data: &Dataset) -> TrainOutcome {
    run_two_stage(config, data).unwrap()
}

/// Simulation plus training on a single worker thread.
fn timed_single_core(config: &TrainConfig) -> (TrainOutcome, Duration) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let t = Instant::now();
        let data = default_data();
        let out = train(config, &data);
        (out, t.elapsed())
    })
}

fn late_attention_mass(out: &TrainOutcome, data: &Dataset) -> f64 {
    let splits = Splits::new(out.report.config.splits, data.len(), out.report.config.seed).unwrap();
    let test = splits.subset(data, &splits.test);
    let records = out.model.score_dataset(&test).unwrap();
    let steps = records[0].weights.len();
    let late = ((steps as f64) * 0.25).floor() as usize;
    records.iter().map(|r| r.weights[steps - late..].iter().sum::<f64>()).sum::<f64>() / records.len() as f64
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    record("entropy oracle", entropy_oracle());
    record("evidence oracle", evidence_oracle());
    record("gradient suite", gradient_suite());
    record("attention contract", attention_contract());
    record("score axioms", score_axioms());
    record("margin dynamics", margin_dynamics());

    let base = TrainConfig::default();
    let (full, full_time) = timed_single_core(&base);
    record(
        "end-to-end separability",
        outcome(
            full.report.test_auroc >= 0.95 && within(full_time, 180.0),
            format!("test AUROC {:.4}, {full_time:.1?} on one thread", full.report.test_auroc),
        ),
    );

    let raw_config = TrainConfig {
        ignore: IgnoreSpec::empty(),
        ..base.clone()
    };
    let (raw, raw_time) = timed_single_core(&raw_config);
    let drop = full.report.test_auroc - raw.report.test_auroc;
    record(
        "filtering ablation",
        outcome(
            drop >= 0.05 && within(raw_time, 180.0),
            format!(
                "filtered {:.4}, unfiltered {:.4}, drop {:.1} points, {raw_time:.1?}",
                full.report.test_auroc,
                raw.report.test_auroc,
                drop * 100.0
            ),
        ),
    );

    let data = default_data();
    let mut with_reg = Vec::new();
    let mut without_reg = Vec::new();
    for seed in 0..5u64 {
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        with_reg.push(train(&cfg, &data).report.test_auroc);
        let mut zero = cfg.clone();
        zero.detector.lambda_path = 0.0;
        zero.detector.lambda_rebound = 0.0;
        without_reg.push(train(&zero, &data).report.test_auroc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    record(
        "regularizer ablation",
        outcome(
            mean(&without_reg) <= mean(&with_reg),
            format!(
                "mean test AUROC over 5 seeds: full {:.4} {:?}, lambdas zero {:.4} {:?}",
                mean(&with_reg),
                with_reg.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
                mean(&without_reg),
                without_reg.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
            ),
        ),
    );

    let rebound_data =
        simulate_dataset(&SimConfig::default_suite().with_mode(HallucinationMode::Rebound), SIM_SEED).unwrap();
    let rebound_run = train(&base, &rebound_data);
    let mass = late_attention_mass(&rebound_run, &rebound_data);
    record(
        "late-step attention",
        outcome(mass > 0.25, format!("mean attention mass on final 25% of steps {mass:.4}")),
    );

    let again: RunReport = train(&base, &data).report;
    let first = full.report.to_json();
    record(
        "determinism",
        outcome(
            first == again.to_json() && first.len() > 100,
            format!("{} byte reports identical: {}", first.len(), first == again.to_json()),
        ),
    );

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
