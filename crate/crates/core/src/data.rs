//! Datasets, labeled/unlabeled/eval splits and mixed-batch sampling.
//!
//! Ground-truth labels of the unlabeled pool are kept in [`HiddenLabels`],
//! which only the diagnostics code reads. [`MixedBatch`] carries unlabeled
//! features and nothing else, so a loss can never see them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::diffcore::{ImageGeom, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Feature matrix with optional per-row class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<Option<usize>>,
    classes: usize,
    image: Option<ImageGeom>,
    feature_std: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<Option<usize>>, classes: usize, image: Option<ImageGeom>) -> Result<Self> {
        if !features.is_matrix() || features.rows() == 0 || features.cols() == 0 {
            return Err(Error::Data(format!(
                "dataset needs a non-empty N x D matrix, got {:?}",
                features.shape()
            )));
        }
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(g) = image {
            if g.len() != features.cols() {
                return Err(Error::Data(format!(
                    "image shape {g:?} does not cover {} features",
                    features.cols()
                )));
            }
        }
        if !features.all_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        let feature_std = column_std(&features, 0..features.rows());
        Ok(Dataset {
            features,
            labels,
            classes,
            image,
            feature_std,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn image(&self) -> Option<ImageGeom> {
        self.image
    }

    pub fn feature_std(&self) -> &[f64] {
        &self.feature_std
    }

    /// SHA-256 over dimensions, feature bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for v in self.features.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for y in &self.labels {
            let code = y.map(|y| y as i64).unwrap_or(-1);
            h.update(code.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// CSV rows of `label,f1,...,fD`, with `-1` for unlabeled rows.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for (row, y) in self.features.row_iter().zip(&self.labels) {
            let _ = write!(s, "{}", y.map(|y| y as i64).unwrap_or(-1));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

fn column_std(x: &Tensor, rows: impl Iterator<Item = usize> + Clone) -> Vec<f64> {
    column_moments(x, rows).1
}

fn column_moments(x: &Tensor, rows: impl Iterator<Item = usize> + Clone) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let mut mean = vec![0.0; d];
    let mut n = 0usize;
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    (mean, std)
}

/// `C` isotropic unit-variance Gaussian clusters whose centres are at least
/// `separation` apart.
pub fn make_gaussian_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::Config("blobs need C >= 2, per_class > 0, D > 0".into()));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let centers = blob_centers(classes, dim, separation, &mut rng);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(Some(c));
        }
    }
    Dataset::new(Tensor::new(vec![classes * per_class, dim], data)?, labels, classes, None)
}

/// Rejection-samples centres from a ball that grows whenever placement stalls.
fn blob_centers(classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut radius = separation.max(1e-9);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut failures = 0;
    while centers.len() < classes {
        let mut c: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        c.iter_mut().for_each(|v| *v *= r / norm);
        let ok = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
        });
        if ok {
            centers.push(c);
            failures = 0;
        } else {
            failures += 1;
            if failures > 200 {
                radius *= 1.1;
                failures = 0;
            }
        }
    }
    centers
}

/// Concentric 2-D rings, class `c` at radius `c + 1` with radial noise.
pub fn make_rings(classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || noise < 0.0 {
        return Err(Error::Config("rings need C >= 2, per_class > 0, noise >= 0".into()));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let e: f64 = rng.sample(StandardNormal);
            let r = (c + 1) as f64 + noise * e;
            data.push(r * angle.cos());
            data.push(r * angle.sin());
            labels.push(Some(c));
        }
    }
    Dataset::new(Tensor::new(vec![classes * per_class, 2], data)?, labels, classes, None)
}

/// Single-channel `side x side` images: one smooth random template per class
/// plus pixel noise. Small enough to exercise the conv extractor.
pub fn make_patterns(classes: usize, per_class: usize, side: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || side < 4 {
        return Err(Error::Config("patterns need C >= 2, per_class > 0, side >= 4".into()));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let px = side * side;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let (fy, fx, ph) = (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            (0..px)
                .map(|i| {
                    let (y, x) = ((i / side) as f64 / side as f64, (i % side) as f64 / side as f64);
                    (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin()
                })
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(classes * per_class * px);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(t.iter().map(|v| v + normal.sample(&mut rng)));
            labels.push(Some(c));
        }
    }
    let geom = ImageGeom {
        channels: 1,
        height: side,
        width: side,
    };
    Dataset::new(Tensor::new(vec![classes * per_class, px], data)?, labels, classes, Some(geom))
}

/// Parses `label,f1,...,fD` rows. A label of `-1` marks an unlabeled row.
/// `classes` defaults to one more than the largest label seen.
pub fn parse_csv<R: Read>(reader: R, has_header: bool, classes: Option<usize>, image: Option<ImageGeom>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1 + usize::from(has_header);
        let rec = rec.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(Error::Parse {
                row,
                msg: "need a label and at least one feature".into(),
            });
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Parse {
                    row,
                    msg: format!("ragged row: {} fields, expected {w}", rec.len()),
                })
            }
            _ => {}
        }
        let label: i64 = rec[0].parse().map_err(|_| Error::Parse {
            row,
            msg: format!("label {:?} is not an integer", &rec[0]),
        })?;
        labels.push(match label {
            -1 => None,
            y if y >= 0 => Some(y as usize),
            y => {
                return Err(Error::Parse {
                    row,
                    msg: format!("label {y} is neither a class nor -1"),
                })
            }
        });
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("column {} value {cell:?} is not numeric", j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    msg: format!("column {} is not finite", j + 1),
                });
            }
            data.push(v);
        }
    }
    let Some(w) = width else {
        return Err(Error::Parse {
            row: 1,
            msg: "empty file".into(),
        });
    };
    let n = labels.len();
    let max_label = labels.iter().flatten().max().copied();
    let classes = match (classes, max_label) {
        (Some(c), _) => c,
        (None, Some(m)) => (m + 1).max(2),
        (None, None) => return Err(Error::Data("no labeled rows and no class count given".into())),
    };
    Dataset::new(Tensor::new(vec![n, w - 1], data)?, labels, classes, image)
}

pub fn load_csv(path: &Path, has_header: bool, classes: Option<usize>, image: Option<ImageGeom>) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(f, has_header, classes, image)
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor, rows: &[usize]) -> Standardizer {
        let (mean, std) = column_moments(x, rows.iter().copied());
        let std = std.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Standardizer { mean, std }
    }

    pub fn identity(dim: usize) -> Standardizer {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardizer for {} features applied to {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        let d = x.cols();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labels_per_class: usize,
    pub seed: u64,
    pub eval_fraction: f64,
    /// Also feed the labeled examples' features to the unlabeled pool.
    pub unlabeled_includes_labeled: bool,
    pub standardize: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            labels_per_class: 4,
            seed: 0,
            eval_fraction: 0.2,
            unlabeled_includes_labeled: true,
            standardize: true,
        }
    }
}

/// Row indices of each subset; disjoint and jointly covering the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub eval: Vec<usize>,
}

impl SplitIndices {
    /// Plain-text manifest: one `subset: i j k ...` line per subset.
    pub fn to_manifest(&self) -> String {
        let line = |name: &str, idx: &[usize]| {
            let body: Vec<String> = idx.iter().map(usize::to_string).collect();
            format!("{name}: {}\n", body.join(" "))
        };
        line("labeled", &self.labeled) + &line("unlabeled", &self.unlabeled) + &line("eval", &self.eval)
    }

    pub fn from_manifest(text: &str) -> Result<SplitIndices> {
        let mut parts = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (name, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
                row: i + 1,
                msg: "expected `name: indices`".into(),
            })?;
            let idx = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|_| Error::Parse {
                        row: i + 1,
                        msg: format!("bad index {t:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            parts.insert(name.trim().to_string(), idx);
        }
        let mut take = |k: &str| {
            parts.remove(k).ok_or_else(|| Error::Parse {
                row: 0,
                msg: format!("missing subset {k}"),
            })
        };
        Ok(SplitIndices {
            labeled: take("labeled")?,
            unlabeled: take("unlabeled")?,
            eval: take("eval")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Ground truth of unlabeled rows, for diagnostics only. `None` where the
/// source data never had a label.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLabels(Vec<Option<usize>>);

impl HiddenLabels {
    pub fn for_diagnostics(&self) -> &[Option<usize>] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub x: Tensor,
    hidden: HiddenLabels,
}

impl UnlabeledSet {
    pub fn new(x: Tensor, hidden: Vec<Option<usize>>) -> Result<Self> {
        if x.rows() != hidden.len() {
            return Err(Error::Data("hidden labels do not match unlabeled rows".into()));
        }
        Ok(UnlabeledSet {
            x,
            hidden: HiddenLabels(hidden),
        })
    }

    pub fn hidden(&self) -> &HiddenLabels {
        &self.hidden
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub eval: LabeledSet,
    pub indices: SplitIndices,
    pub standardizer: Standardizer,
    /// Per-feature std of the (standardized) training rows.
    pub feature_std: Vec<f64>,
    pub classes: usize,
    pub image: Option<ImageGeom>,
}

/// Holds out the eval set, then draws exactly `labels_per_class` examples per
/// class without replacement. Every remaining training row is unlabeled.
pub fn make_split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    if spec.labels_per_class == 0 {
        return Err(Error::Config("labels_per_class must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&spec.eval_fraction) {
        return Err(Error::Config(format!(
            "eval_fraction must lie in [0, 1), got {}",
            spec.eval_fraction
        )));
    }
    let mut rng = rng::stream(spec.seed, Stream::Split);
    let mut known: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i].is_some()).collect();
    known.shuffle(&mut rng);
    let n_eval = (spec.eval_fraction * known.len() as f64).round() as usize;
    let mut eval: Vec<usize> = known[..n_eval].to_vec();
    let pool = &known[n_eval..];

    let mut per_class = vec![0usize; ds.classes];
    let mut labeled = Vec::with_capacity(spec.labels_per_class * ds.classes);
    for &i in pool {
        let y = ds.labels[i].expect("known rows are labeled");
        if per_class[y] < spec.labels_per_class {
            per_class[y] += 1;
            labeled.push(i);
        }
    }
    if let Some(c) = per_class.iter().position(|&n| n < spec.labels_per_class) {
        return Err(Error::Data(format!(
            "infeasible label budget: class {c} has only {} training examples for {} labels",
            per_class[c], spec.labels_per_class
        )));
    }
    let mut is_used = vec![false; ds.len()];
    for &i in labeled.iter().chain(&eval) {
        is_used[i] = true;
    }
    let unlabeled: Vec<usize> = (0..ds.len()).filter(|&i| !is_used[i]).collect();
    labeled.sort_unstable();
    eval.sort_unstable();
    let indices = SplitIndices {
        labeled,
        unlabeled,
        eval,
    };
    materialize(ds, indices, spec)
}

/// Builds the three sets from explicit indices, e.g. a saved manifest.
pub fn materialize(ds: &Dataset, indices: SplitIndices, spec: &SplitSpec) -> Result<Splits> {
    let mut seen = vec![false; ds.len()];
    for &i in indices.labeled.iter().chain(&indices.unlabeled).chain(&indices.eval) {
        if i >= ds.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Data(format!("split index {i} out of range or repeated")));
        }
    }
    if indices.labeled.iter().chain(&indices.eval).any(|&i| ds.labels[i].is_none()) {
        return Err(Error::Data("labeled and eval subsets need labeled rows".into()));
    }
    let mut train: Vec<usize> = indices.labeled.iter().chain(&indices.unlabeled).copied().collect();
    train.sort_unstable();
    let standardizer = if spec.standardize {
        Standardizer::fit(ds.features(), &train)
    } else {
        Standardizer::identity(ds.dim())
    };
    let x = standardizer.apply(ds.features())?;
    let labeled_set = |idx: &[usize]| -> Result<LabeledSet> {
        Ok(LabeledSet {
            x: crate::diffcore::ops::index_select_rows(&x, idx)?,
            y: idx.iter().map(|&i| ds.labels[i].expect("checked above")).collect(),
        })
    };
    let labeled = labeled_set(&indices.labeled)?;
    let eval = labeled_set(&indices.eval)?;
    let pool: Vec<usize> = if spec.unlabeled_includes_labeled {
        train.clone()
    } else {
        indices.unlabeled.clone()
    };
    if pool.is_empty() {
        return Err(Error::Data("unlabeled pool is empty".into()));
    }
    let unlabeled = UnlabeledSet::new(
        crate::diffcore::ops::index_select_rows(&x, &pool)?,
        pool.iter().map(|&i| ds.labels[i]).collect(),
    )?;
    let feature_std = column_std(&x, train.iter().copied());
    Ok(Splits {
        labeled,
        unlabeled,
        eval,
        indices,
        standardizer,
        feature_std,
        classes: ds.classes,
        image: ds.image,
    })
}

/// `B` weakly augmented labeled rows plus `mu * B` unlabeled rows in both views.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub labeled_x: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled_weak: Tensor,
    pub unlabeled_strong: Tensor,
    /// Row of each unlabeled example in the unlabeled pool.
    pub unlabeled_index: Vec<usize>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.labels.len() + self.unlabeled_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cycles through a shuffled permutation, reshuffling at every epoch end.
#[derive(Clone, Debug)]
struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochCursor {
    fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        EpochCursor { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Endless stream of [`MixedBatch`]es with independent rng streams for
/// labeled sampling, unlabeled sampling, weak and strong augmentation.
pub struct BatchSampler<'a> {
    labeled: &'a LabeledSet,
    unlabeled: &'a Tensor,
    batch_size: usize,
    mu: usize,
    weak: AugmentPolicy,
    strong: AugmentPolicy,
    labeled_cursor: EpochCursor,
    unlabeled_cursor: EpochCursor,
    weak_rng: ChaCha8Rng,
    strong_rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        labeled: &'a LabeledSet,
        unlabeled: &'a UnlabeledSet,
        batch_size: usize,
        mu: usize,
        weak: AugmentPolicy,
        strong: AugmentPolicy,
        seed: u64,
    ) -> Result<Self> {
        if labeled.y.is_empty() || unlabeled.is_empty() {
            return Err(Error::Data("batch sampling needs non-empty labeled and unlabeled sets".into()));
        }
        if batch_size == 0 || mu == 0 {
            return Err(Error::Config("batch_size and mu must be at least 1".into()));
        }
        Ok(BatchSampler {
            labeled,
            unlabeled: &unlabeled.x,
            batch_size,
            mu,
            weak,
            strong,
            labeled_cursor: EpochCursor::new(labeled.y.len(), rng::stream(seed, Stream::LabeledSampling)),
            unlabeled_cursor: EpochCursor::new(unlabeled.len(), rng::stream(seed, Stream::UnlabeledSampling)),
            weak_rng: rng::stream(seed, Stream::WeakAugment),
            strong_rng: rng::stream(seed, Stream::StrongAugment),
        })
    }

    /// Batches needed to visit every unlabeled example once.
    pub fn unlabeled_epoch_len(&self) -> usize {
        self.unlabeled.rows().div_ceil(self.mu * self.batch_size)
    }

    pub fn next_batch(&mut self) -> MixedBatch {
        let d = self.unlabeled.cols();
        let b = self.batch_size;
        let u = self.mu * b;
        let mut labeled_x = vec![0.0; b * d];
        let mut labels = Vec::with_capacity(b);
        for row in labeled_x.chunks_mut(d) {
            let i = self.labeled_cursor.next();
            self.weak.apply_into(self.labeled.x.row(i), row, &mut self.weak_rng);
            labels.push(self.labeled.y[i]);
        }
        let mut weak = vec![0.0; u * d];
        let mut strong = vec![0.0; u * d];
        let mut index = Vec::with_capacity(u);
        for (w, s) in weak.chunks_mut(d).zip(strong.chunks_mut(d)) {
            let i = self.unlabeled_cursor.next();
            let x = self.unlabeled.row(i);
            self.weak.apply_into(x, w, &mut self.weak_rng);
            self.strong.apply_into(x, s, &mut self.strong_rng);
            index.push(i);
        }
        MixedBatch {
            labeled_x: Tensor::new(vec![b, d], labeled_x).expect("sized above"),
            labels,
            unlabeled_weak: Tensor::new(vec![u, d], weak).expect("sized above"),
            unlabeled_strong: Tensor::new(vec![u, d], strong).expect("sized above"),
            unlabeled_index: index,
        }
    }
}

impl Iterator for BatchSampler<'_> {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentConfig;

    #[test]
    fn blobs_size_and_determinism() {
        let a = make_gaussian_blobs(10, 500, 4, 3.0, 1).unwrap();
        assert_eq!(a.len(), 5000);
        assert_eq!(a, make_gaussian_blobs(10, 500, 4, 3.0, 1).unwrap());
    }

    #[test]
    fn rings_without_noise_have_exact_radii() {
        let ds = make_rings(4, 250, 0.0, 3).unwrap();
        assert_eq!(ds.len(), 1000);
        for (row, y) in ds.features().row_iter().zip(ds.labels()) {
            let r = (row[0] * row[0] + row[1] * row[1]).sqrt();
            assert!((r - (y.unwrap() + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_format_definition() {
        let ds = parse_csv("2,0.1,0.2\n-1,0.3,0.4".as_bytes(), false, None, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[Some(2), None]);
        assert_eq!(ds.features().data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn csv_errors_name_the_row() {
        assert!(matches!(parse_csv("".as_bytes(), false, None, None), Err(Error::Parse { .. })));
        match parse_csv("1,0.5,0.5\n0,0.1\n".as_bytes(), false, None, None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected ragged-row error, got {other:?}"),
        }
        match parse_csv("h,a\n1,x\n".as_bytes(), true, None, None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected non-numeric error, got {other:?}"),
        }
    }

    #[test]
    fn split_counts_and_partition() {
        let ds = make_gaussian_blobs(10, 60, 3, 3.0, 0).unwrap();
        let spec = SplitSpec {
            labels_per_class: 4,
            seed: 5,
            ..Default::default()
        };
        let s = make_split(&ds, &spec).unwrap();
        assert_eq!(s.labeled.y.len(), 40);
        let mut counts = [0; 10];
        s.labeled.y.iter().for_each(|&y| counts[y] += 1);
        assert!(counts.iter().all(|&c| c == 4));
        let mut all: Vec<usize> = s.indices.labeled.iter().chain(&s.indices.unlabeled).chain(&s.indices.eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..600).collect::<Vec<_>>());
        assert_eq!(s.eval.y.len(), 120);
        assert_eq!(s.unlabeled.len(), 480);
    }

    #[test]
    fn zero_budget_and_infeasible_budget() {
        let ds = make_gaussian_blobs(3, 5, 2, 3.0, 0).unwrap();
        let mut spec = SplitSpec {
            labels_per_class: 0,
            ..Default::default()
        };
        assert!(matches!(make_split(&ds, &spec), Err(Error::Config(_))));
        spec.labels_per_class = 50;
        assert!(matches!(make_split(&ds, &spec), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let idx = SplitIndices {
            labeled: vec![1, 4],
            unlabeled: vec![0, 2, 3],
            eval: vec![],
        };
        assert_eq!(SplitIndices::from_manifest(&idx.to_manifest()).unwrap(), idx);
    }

    #[test]
    fn batch_composition() {
        let ds = make_gaussian_blobs(4, 100, 3, 3.0, 0).unwrap();
        let s = make_split(&ds, &SplitSpec::default()).unwrap();
        let cfg = AugmentConfig::default();
        let weak = AugmentPolicy::weak(&cfg, &s.feature_std, None).unwrap();
        let strong = AugmentPolicy::strong(&cfg, &s.feature_std, None).unwrap();
        let mut sampler = BatchSampler::new(&s.labeled, &s.unlabeled, 64, 7, weak, strong, 0).unwrap();
        let b = sampler.next_batch();
        assert_eq!(b.len(), 512);
        assert_eq!(b.unlabeled_weak.shape(), &[448, 3]);
    }
}
