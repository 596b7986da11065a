use trajscope_core::evidence::EvidenceSample;
use trajscope_core::reference::train_reference;
use trajscope_core::train::{cross_eval, grid_search, run_two_stage, GridSpec, SplitSizes, Splits};
use trajscope_core::*;

fn quick_config(train: usize, val: usize, test: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.splits = SplitSizes { train, val, test };
    c.stage1.epochs = 30;
    c.stage2.epochs = 15;
    c
}

fn suite(factual: usize, hallucinated: usize) -> SimConfig {
    let mut c = SimConfig::default_suite();
    c.factual = factual;
    c.hallucinated = hallucinated;
    c
}

#[test]
fn generator_recovers_the_decay_law() {
    let config = suite(400, 1);
    let data = simulate_dataset(&config, 21).unwrap();
    let spec = IgnoreSpec::standard();
    let factual: Vec<(usize, EvidenceSample)> = data
        .trajectories
        .iter()
        .filter(|t| t.label == Label::Factual)
        .map(|t| (t.meta["regime"].parse().unwrap(), EvidenceSample::from_raw(t, &spec, 5)))
        .collect();
    let (train, held_out) = factual.split_at(300);
    let train: Vec<EvidenceSample> = train.iter().map(|(_, s)| s.clone()).collect();
    let mut gen = ReferenceGenerator::with_defaults(config.d_q, 1);
    let stage1 = Stage1Config {
        epochs: 60,
        ..Stage1Config::default()
    };
    let loss = train_reference(&mut gen, &train, &stage1, 2).unwrap();
    assert!(loss.last().unwrap() < &loss[0]);

    let max_step = config.max_step;
    let mut err = 0.0;
    let mut n = 0.0;
    for (regime, s) in held_out {
        let pred = gen.predict_trajectory(&s.query, max_step).unwrap();
        for t in 0..=max_step {
            err += (pred.at_step(t).mean_entropy - config.regimes[*regime].decay(t, max_step)).abs();
            n += 1.0;
        }
    }
    let mae = err / n;
    assert!(mae < 0.1, "mean absolute error {mae}");

    let a = gen.predict_trajectory(&config.regimes[0].query_cluster_center, max_step).unwrap();
    let b = gen.predict_trajectory(&config.regimes[1].query_cluster_center, max_step).unwrap();
    let gap = a
        .as_arrays()
        .iter()
        .zip(b.as_arrays())
        .flat_map(|(x, y)| (0..3).map(move |d| (x[d] - y[d]).abs()))
        .fold(0.0, f64::max);
    assert!(gap > 0.2, "regime curves differ by at most {gap}");
}

#[test]
fn zero_lambdas_leave_total_equal_to_classification() {
    let data = simulate_dataset(&suite(60, 60), 22).unwrap();
    let mut c = quick_config(80, 20, 20);
    c.stage2.epochs = 5;
    c.detector.lambda_path = 0.0;
    c.detector.lambda_rebound = 0.0;
    let report = run_two_stage(&c, &data).unwrap().report;
    for e in &report.epochs {
        assert_eq!(e.total, e.cls);
        assert!(e.path > 0.0 || e.rebound > 0.0, "regularizers are still logged");
    }
}

#[test]
fn selected_epoch_maximises_validation_auroc() {
    let data = simulate_dataset(&suite(60, 60), 23).unwrap();
    let report = run_two_stage(&quick_config(80, 20, 20), &data).unwrap().report;
    let best = report.epochs.iter().map(|e| e.val_auroc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.epochs[report.selected_epoch].val_auroc, best);
    assert_eq!(report.best_val_auroc, best);
    assert_eq!(report.stage1_loss.len(), 30);
}

#[test]
fn warmup_ramps_lambdas() {
    let data = simulate_dataset(&suite(40, 40), 24).unwrap();
    let mut c = quick_config(50, 15, 15);
    c.stage2.epochs = 10;
    c.stage2.warmup_fraction = 0.5;
    let report = run_two_stage(&c, &data).unwrap().report;
    assert_eq!(report.epochs[0].lambda_path, 0.0);
    assert!(report.epochs[2].lambda_path < report.epochs[6].lambda_path);
    assert_eq!(report.epochs[9].lambda_path, c.detector.lambda_path);
}

#[test]
fn training_rejects_bad_inputs() {
    let mut data = simulate_dataset(&suite(30, 30), 25).unwrap();
    let c = quick_config(30, 15, 15);
    assert!(matches!(
        run_two_stage(&quick_config(50, 15, 15), &data),
        Err(Error::Config(_))
    ));
    data.trajectories[0].label = Label::Unlabeled;
    assert!(matches!(run_two_stage(&c, &data), Err(Error::Unlabeled(_))));
    for t in &mut data.trajectories {
        t.label = Label::Factual;
    }
    assert!(matches!(run_two_stage(&c, &data), Err(Error::SingleClass(_))));
}

#[test]
fn cross_eval_contracts() {
    let mut a_config = suite(300, 300);
    a_config.regimes.truncate(1);
    let mut b_config = suite(150, 150);
    b_config.regimes.remove(0);
    let a = simulate_dataset(&a_config, 26).unwrap();
    let b = simulate_dataset(&b_config, 27).unwrap();

    let mut c = quick_config(400, 100, 100);
    c.standardize = true;
    let out = run_two_stage(&c, &a).unwrap();

    let splits = Splits::new(c.splits, a.len(), c.seed).unwrap();
    let own_test = splits.subset(&a, &splits.test);
    assert_eq!(cross_eval(&out.model, &own_test).unwrap(), out.report.test_auroc);

    let transfer = cross_eval(&out.model, &b).unwrap();
    assert!(transfer > 0.7, "cross-regime AUROC {transfer}");

    let mut unlabeled = b.clone();
    unlabeled.trajectories[3].label = Label::Unlabeled;
    assert!(matches!(cross_eval(&out.model, &unlabeled), Err(Error::Unlabeled(_))));

    let single = Dataset::new(
        b.header.clone(),
        b.trajectories.iter().filter(|t| t.label == Label::Factual).cloned().collect(),
    );
    assert!(matches!(cross_eval(&out.model, &single), Err(Error::SingleClass(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    out.model.save(&path).unwrap();
    let loaded = TrainedModel::load(&path).unwrap();
    assert_eq!(loaded, out.model);
    assert_eq!(cross_eval(&loaded, &b).unwrap(), transfer);
}

#[test]
fn grid_of_one_returns_its_config() {
    let data = simulate_dataset(&suite(40, 40), 28).unwrap();
    let grid = GridSpec {
        base: quick_config(50, 15, 15),
        ..GridSpec::default()
    };
    let result = grid_search(&grid, &data).unwrap();
    assert_eq!(result.reports.len(), 1);
    assert_eq!(result.best, grid.base);
}

#[test]
fn grid_superset_never_loses_to_its_member() {
    let data = simulate_dataset(&suite(40, 40), 29).unwrap();
    let base = quick_config(50, 15, 15);
    let single = run_two_stage(&base, &data).unwrap().report;
    let grid = GridSpec {
        base: base.clone(),
        lambda_path: vec![0.0, base.detector.lambda_path],
        stage2_lr: vec![3e-4, base.stage2.lr],
        ..GridSpec::default()
    };
    let result = grid_search(&grid, &data).unwrap();
    assert_eq!(result.reports.len(), 4);
    assert!(result.reports[result.best_index].best_val_auroc >= single.best_val_auroc);
    assert!(result.reports.contains(&single));
}

#[test]
fn full_grid_on_reduced_set() {
    let mut sim = suite(12, 12);
    sim.max_step = 4;
    sim.seq_len = 6;
    let data = simulate_dataset(&sim, 30).unwrap();
    let mut base = TrainConfig::default();
    base.splits = SplitSizes { train: 12, val: 6, test: 6 };
    base.stage1.epochs = 1;
    base.stage2.epochs = 1;
    base.detector.hidden = 4;
    base.detector.attn_dim = 2;
    base.detector.head_hidden = 2;
    let grid = GridSpec::full(base);
    let result = grid_search(&grid, &data).unwrap();
    assert_eq!(result.reports.len(), 2 * 3 * 3 * 3 * 9 * 9 * 2);
    let best = &result.reports[result.best_index];
    assert!(result.reports.iter().all(|r| r.best_val_auroc <= best.best_val_auroc));
}
