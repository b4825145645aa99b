use mutexmatch::config::TrainConfig;
use mutexmatch::data::{load_csv, make_gaussian_blobs, make_rings, make_split, materialize, Dataset, SplitIndices, SplitSpec};
use mutexmatch::diffcore::Tensor;
use mutexmatch::model::ModelParams;
use mutexmatch::metrics::test_accuracy;
use mutexmatch::trainer::fit;
use mutexmatch::Error;

fn labels(ds: &Dataset) -> Vec<usize> {
    ds.labels().iter().map(|y| y.unwrap()).collect()
}

fn nearest_centroid_accuracy(x: &Tensor, y: &[usize], classes: usize) -> f64 {
    let d = x.cols();
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0.0; classes];
    for (row, &c) in x.row_iter().zip(y) {
        counts[c] += 1.0;
        for (m, v) in centroids[c].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (m, n) in centroids.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n);
    }
    let correct = x
        .row_iter()
        .zip(y)
        .filter(|(row, &c)| {
            let dist = |m: &Vec<f64>| m.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))) == Some(c)
        })
        .count();
    correct as f64 / y.len() as f64
}

#[test]
fn csv_rows_with_unlabeled_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "2,0.1,0.2\n-1,0.3,0.4").unwrap();
    let ds = load_csv(&path, false, None, None).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels(), &[Some(2), None]);
    assert_eq!(ds.features().data(), &[0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn empty_csv_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::write(&path, "").unwrap();
    assert!(matches!(load_csv(&path, false, None, None), Err(Error::Parse { .. })));
}

#[test]
fn ragged_and_non_numeric_rows_name_their_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "0,1,2\n1,3\n").unwrap();
    assert!(matches!(load_csv(&path, false, None, None), Err(Error::Parse { row: 2, .. })));
    std::fs::write(&path, "0,1,2\n1,3,x\n").unwrap();
    assert!(matches!(load_csv(&path, false, None, None), Err(Error::Parse { row: 2, .. })));
}

#[test]
fn export_then_load_round_trips() {
    let ds = make_gaussian_blobs(3, 15, 4, 2.0, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blobs.csv");
    ds.write_csv(&path).unwrap();
    let back = load_csv(&path, false, Some(3), None).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.fingerprint(), ds.fingerprint());
}

#[test]
fn blob_sizes_and_determinism() {
    let ds = make_gaussian_blobs(10, 500, 16, 4.0, 3).unwrap();
    assert_eq!(ds.len(), 5000);
    assert_eq!(ds.dim(), 16);
    assert_eq!(make_gaussian_blobs(10, 500, 16, 4.0, 3).unwrap().features(), ds.features());
    assert_ne!(make_gaussian_blobs(10, 500, 16, 4.0, 4).unwrap().features(), ds.features());
}

#[test]
fn well_separated_blobs_are_nearest_centroid_separable() {
    let ds = make_gaussian_blobs(10, 100, 16, 40.0, 1).unwrap();
    assert_eq!(nearest_centroid_accuracy(ds.features(), &labels(&ds), 10), 1.0);
    let close = make_gaussian_blobs(10, 100, 16, 0.5, 1).unwrap();
    assert!(nearest_centroid_accuracy(close.features(), &labels(&close), 10) < 0.9);
}

#[test]
fn rings_defeat_linear_rules_but_not_an_mlp() {
    let ds = make_rings(4, 250, 0.05, 2).unwrap();
    assert_eq!(ds.len(), 1000);
    let linear = nearest_centroid_accuracy(ds.features(), &labels(&ds), 4);

    let mut cfg = TrainConfig::default();
    cfg.apply_overrides(&[
        "data.source=rings",
        "data.classes=4",
        "data.per_class=250",
        "data.noise=0.05",
        "data.seed=2",
        "split.labels_per_class=150",
        "model.hidden=32,32",
        "model.head_hidden=16",
        "lambda_p=0",
        "lambda_n=0",
        "lambda_sep=0",
        "batch_size=32",
        "mu=1",
        "lr0=0.1",
        "steps=1500",
        "eval_every=0",
    ])
    .unwrap();
    let prepared = mutexmatch::run::prepare(&cfg).unwrap();
    let model = ModelParams::init(&prepared.spec, 0).unwrap();
    let out = fit(model, &prepared.splits, &cfg).unwrap();
    let mlp = test_accuracy(&out.model, &prepared.splits.eval).unwrap();
    assert!(linear < 0.5, "nearest-centroid accuracy {linear}");
    assert!(mlp > 0.9, "mlp accuracy {mlp}");
}

#[test]
fn split_manifest_reproduces_the_split() {
    let ds = make_gaussian_blobs(4, 30, 3, 3.0, 5).unwrap();
    let spec = SplitSpec::default();
    let s = make_split(&ds, &spec).unwrap();
    let indices = SplitIndices::from_manifest(&s.indices.to_manifest()).unwrap();
    let again = materialize(&ds, indices, &spec).unwrap();
    assert_eq!(again.labeled, s.labeled);
    assert_eq!(again.eval, s.eval);
    assert_eq!(again.unlabeled.x, s.unlabeled.x);
    assert_eq!(again.standardizer, s.standardizer);
}

#[test]
fn split_seeds_choose_different_labels() {
    let ds = make_gaussian_blobs(10, 50, 4, 3.0, 0).unwrap();
    let a = make_split(&ds, &SplitSpec::default()).unwrap();
    let b = make_split(&ds, &SplitSpec { seed: 1, ..SplitSpec::default() }).unwrap();
    assert_eq!(a.labeled.y.len(), 40);
    assert_ne!(a.indices.labeled, b.indices.labeled);
}

#[test]
fn infeasible_budget_is_rejected() {
    let ds = make_gaussian_blobs(3, 5, 2, 3.0, 0).unwrap();
    let spec = SplitSpec {
        labels_per_class: 10,
        ..SplitSpec::default()
    };
    assert!(matches!(make_split(&ds, &spec), Err(Error::Data(_))));
    let zero = SplitSpec {
        labels_per_class: 0,
        ..SplitSpec::default()
    };
    assert!(matches!(make_split(&ds, &zero), Err(Error::Config(_))));
}
