use mutexmatch::data::{make_gaussian_blobs, make_split, SplitSpec};
use mutexmatch::diffcore::Tensor;
use mutexmatch::metrics::{
    complementary_error, complementary_error_all, diagonal_mass, evaluate, export_report, parse_matrix_csv,
    prediction_heatmaps, pseudo_label_accuracy, pseudo_label_accuracy_from, test_accuracy, DiagnosticLog,
    DiagnosticViews,
};
use mutexmatch::model::{Group, ModelParams, ModelSpec};

const C: usize = 5;

fn uniform_model(seed: u64) -> ModelParams {
    let mut m = ModelParams::init(&ModelSpec::mlp(4, &[8], 6, C), seed).unwrap();
    let r = m.group_range(Group::Tpc);
    for t in &mut m.tensors_mut()[r.end - 2..r.end] {
        t.data_mut().fill(0.0);
    }
    m
}

fn views(per_class: usize) -> DiagnosticViews {
    let ds = make_gaussian_blobs(C, per_class, 4, 2.0, 11).unwrap();
    let y: Vec<usize> = ds.labels().iter().map(|l| l.unwrap()).collect();
    DiagnosticViews::identity(ds.features(), &y).unwrap()
}

#[test]
fn uniform_predictions_spread_errors_evenly() {
    let model = uniform_model(0);
    let v = views(200);
    for m in 1..=C {
        let e = complementary_error(&model, &v, m).unwrap();
        assert!((e - 1.0 / C as f64).abs() < 1e-12, "m={m}: {e}");
    }
}

#[test]
fn memorizing_model_is_always_right() {
    let y: Vec<usize> = (0..50).map(|i| (i * 7) % C).collect();
    let rows: Vec<Vec<f64>> = y
        .iter()
        .map(|&c| (0..C).map(|j| if j == c { 0.96 } else { 0.01 }).collect())
        .collect();
    let p = Tensor::from_rows(&rows).unwrap();
    let acc = pseudo_label_accuracy_from(&p, &y, 0.95).unwrap();
    assert_eq!(acc.unfiltered, 1.0);
    assert_eq!(acc.filtered, Some(1.0));
    assert_eq!(acc.n_filtered, 50);
    assert_eq!(complementary_error_all(&p, &y).unwrap()[C - 1], 1.0);
}

#[test]
fn complementary_error_ignores_sample_order() {
    let model = ModelParams::init(&ModelSpec::mlp(4, &[8], 6, C), 3).unwrap();
    let v = views(40);
    let p = model.predict(&v.x).unwrap();
    let base = complementary_error_all(&p, v.labels()).unwrap();
    let n = v.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
    let rows: Vec<&[f64]> = perm.iter().map(|&i| p.row(i)).collect();
    let labels: Vec<usize> = perm.iter().map(|&i| v.labels()[i]).collect();
    let shuffled = complementary_error_all(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
    for (a, b) in base.iter().zip(&shuffled) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pseudo_label_accuracy_on_clean_views_equals_test_accuracy() {
    let ds = make_gaussian_blobs(C, 40, 4, 2.0, 4).unwrap();
    let s = make_split(&ds, &SplitSpec::default()).unwrap();
    let model = ModelParams::init(&ModelSpec::mlp(4, &[8], 6, C), 5).unwrap();
    let v = DiagnosticViews::identity(&s.eval.x, &s.eval.y).unwrap();
    let pl = pseudo_label_accuracy(&model, &v, 0.5).unwrap();
    assert_eq!(pl.unfiltered, test_accuracy(&model, &s.eval).unwrap());
}

#[test]
fn diagnostics_leave_the_model_alone() {
    let ds = make_gaussian_blobs(C, 40, 4, 2.0, 4).unwrap();
    let s = make_split(&ds, &SplitSpec::default()).unwrap();
    let model = ModelParams::init(&ModelSpec::mlp(4, &[8], 6, C), 5).unwrap();
    let before = model.clone();
    let v = DiagnosticViews::identity(&s.eval.x, &s.eval.y).unwrap();
    let r = evaluate(&model, &s.eval, &v, 0.95, 0).unwrap();
    assert_eq!(model, before);
    for f in [r.test_accuracy, r.pseudo_label.unfiltered, r.tpc_diagonal, r.tnc_diagonal] {
        assert!((0.0..=1.0).contains(&f));
    }
    assert_eq!(r.complementary_error.len(), C);
}

#[test]
fn identity_heatmap_has_full_diagonal() {
    let h = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    assert_eq!(diagonal_mass(&h), 1.0);
    let model = uniform_model(1);
    let hm = prediction_heatmaps(&model, &views(10)).unwrap();
    assert!((diagonal_mass(&hm.tpc) - 1.0 / C as f64).abs() < 1e-12);
}

#[test]
fn report_files_are_deterministic_and_parse_back() {
    let ds = make_gaussian_blobs(C, 40, 4, 2.0, 4).unwrap();
    let s = make_split(&ds, &SplitSpec::default()).unwrap();
    let model = ModelParams::init(&ModelSpec::mlp(4, &[8], 6, C), 5).unwrap();
    let v = DiagnosticViews::identity(&s.eval.x, &s.eval.y).unwrap();
    let mut log = DiagnosticLog::default();
    log.push(evaluate(&model, &s.eval, &v, 0.95, 10).unwrap());
    let steps = vec![serde_json::json!({"step": 10})];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    export_report(a.path(), &steps, &log).unwrap();
    export_report(b.path(), &steps, &log).unwrap();
    for f in ["metrics.jsonl", "summary.csv", "complementary_error.csv", "heatmap_tpc.csv", "heatmap_tnc.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let text = std::fs::read_to_string(a.path().join("heatmap_tpc.csv")).unwrap();
    let h = parse_matrix_csv(&text).unwrap();
    assert_eq!(&h, &log.last().unwrap().heatmaps.as_ref().unwrap().tpc);
    let empty = DiagnosticLog::default();
    assert!(export_report(a.path(), &steps, &empty).is_err());
}
