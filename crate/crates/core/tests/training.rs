use mutexmatch::config::{Objective, TrainConfig};
use mutexmatch::model::{Group, ModelParams};
use mutexmatch::run::{prepare, Prepared};
use mutexmatch::trainer::{fit, FitOutcome};
use mutexmatch::Error;

fn small() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_overrides(&[
        "data.classes=4",
        "data.per_class=40",
        "data.dim=6",
        "data.separation=3",
        "model.hidden=16",
        "model.head_hidden=8",
        "batch_size=8",
        "mu=3",
        "tau=0.6",
        "steps=100",
        "eval_every=50",
    ])
    .unwrap();
    cfg
}

fn train(cfg: &TrainConfig) -> (Prepared, FitOutcome) {
    let prepared = prepare(cfg).unwrap();
    let model = ModelParams::init(&prepared.spec, cfg.seed).unwrap();
    let outcome = fit(model, &prepared.splits, cfg).unwrap();
    (prepared, outcome)
}

fn group_bits(model: &ModelParams, groups: &[Group]) -> Vec<u64> {
    groups
        .iter()
        .flat_map(|&g| model.group_range(g))
        .flat_map(|i| model.tensors()[i].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn short_run_stays_finite_and_logs_every_step() {
    let cfg = small();
    let (_, out) = train(&cfg);
    assert_eq!(out.steps.len(), 100);
    assert!(out.model.all_finite());
    for (i, r) in out.steps.iter().enumerate() {
        assert_eq!(r.step, i + 1);
        assert!(r.total.is_finite() && r.total >= 0.0);
        assert_eq!(r.n_high + r.n_low, cfg.mu * cfg.batch_size);
    }
    let evals: Vec<usize> = out.diagnostics.records.iter().map(|r| r.step).collect();
    assert_eq!(evals, vec![50, 100]);
    assert!(out.steps[49].eval.is_some() && out.steps[48].eval.is_none());
    assert!(out.best.is_some());
}

#[test]
fn identical_configs_give_identical_runs() {
    let cfg = small();
    let (_, a) = train(&cfg);
    let (_, b) = train(&cfg);
    assert_eq!(a.model, b.model);
    assert_eq!(a.steps, b.steps);
}

#[test]
fn different_seeds_differ() {
    let mut cfg = small();
    cfg.steps = 10;
    let (_, a) = train(&cfg);
    cfg.seed = 1;
    let (_, b) = train(&cfg);
    assert_ne!(a.model, b.model);
}

#[test]
fn zero_steps_evaluates_the_initial_model() {
    let mut cfg = small();
    cfg.steps = 0;
    let (prepared, out) = train(&cfg);
    assert!(out.steps.is_empty());
    assert_eq!(out.diagnostics.records.len(), 1);
    assert_eq!(out.diagnostics.records[0].step, 0);
    assert_eq!(out.model, ModelParams::init(&prepared.spec, cfg.seed).unwrap());
}

#[test]
fn supervised_only_ignores_unlabeled_features() {
    let mut cfg = small();
    cfg.apply_overrides(&["lambda_p=0", "lambda_n=0", "lambda_sep=0"]).unwrap();
    cfg.steps = 30;
    let prepared = prepare(&cfg).unwrap();
    let model = ModelParams::init(&prepared.spec, cfg.seed).unwrap();
    let a = fit(model.clone(), &prepared.splits, &cfg).unwrap();

    let mut splits = prepare(&cfg).unwrap().splits;
    let x = splits.unlabeled.x.map(|v| 3.0 * v - 1.0);
    splits.unlabeled.x = x;
    let b = fit(model, &splits, &cfg).unwrap();
    let groups = [Group::Extractor, Group::Tpc];
    assert_eq!(group_bits(&a.model, &groups), group_bits(&b.model, &groups));
    for (ra, rb) in a.steps.iter().zip(&b.steps) {
        assert_eq!(ra.l_sup.to_bits(), rb.l_sup.to_bits());
        assert_eq!(ra.n_high + ra.n_low, rb.n_high + rb.n_low);
    }
}

#[test]
fn zero_weights_reduce_to_the_baseline_bit_for_bit() {
    let mut cfg = small();
    cfg.steps = 40;
    cfg.apply_overrides(&["lambda_n=0", "lambda_sep=0"]).unwrap();
    let (_, a) = train(&cfg);
    cfg.objective = Objective::FixMatch;
    let (_, b) = train(&cfg);
    let groups = [Group::Extractor, Group::Tpc];
    assert_eq!(group_bits(&a.model, &groups), group_bits(&b.model, &groups));
    for (ra, rb) in a.steps.iter().zip(&b.steps) {
        assert_eq!(ra.l_p.to_bits(), rb.l_p.to_bits());
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    }
}

#[test]
fn divergence_aborts_with_partial_log() {
    let mut cfg = small();
    cfg.lr0 = 1e12;
    let prepared = prepare(&cfg).unwrap();
    let model = ModelParams::init(&prepared.spec, cfg.seed).unwrap();
    let abort = fit(model, &prepared.splits, &cfg).unwrap_err();
    assert!(matches!(abort.error, Error::Numeric(_)), "{:?}", abort.error);
    assert!(abort.step >= 1 && abort.step < cfg.steps);
    assert_eq!(abort.steps.len(), abort.step - 1);
}

#[test]
fn ema_model_is_used_for_evaluation() {
    let mut cfg = small();
    cfg.steps = 20;
    cfg.eval_every = 0;
    let (_, plain) = train(&cfg);
    cfg.ema_decay = 0.9;
    let (_, ema) = train(&cfg);
    assert_eq!(plain.steps.last().map(|r| r.total), ema.steps.last().map(|r| r.total));
    assert_ne!(plain.model, ema.model);
}
