//! Evaluation and diagnostics: accuracy, pseudo-label accuracy,
//! complementary-label error by rank, and per-class prediction heatmaps.
//!
//! Diagnostics run on weak views of the unlabeled pool that are drawn once
//! with a fixed per-sample seed, so curves across eval points are comparable.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::data::{HiddenLabels, LabeledSet, UnlabeledSet};
use crate::diffcore::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::{self, Stream};

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", probs.rows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = probs.row_iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Test accuracy of the TPC head on un-augmented eval rows.
pub fn test_accuracy(model: &ModelParams, eval: &LabeledSet) -> Result<f64> {
    if eval.y.is_empty() {
        return Err(Error::Data("eval set is empty".into()));
    }
    accuracy(&model.predict(&eval.x)?, &eval.y)
}

/// Unlabeled rows under a fixed weak view, paired with their hidden labels.
#[derive(Clone, Debug)]
pub struct DiagnosticViews {
    pub x: Tensor,
    labels: Vec<usize>,
}

impl DiagnosticViews {
    /// Weak view of every unlabeled row with a known hidden label; sample `i`
    /// always uses the same substream.
    pub fn new(unlabeled: &UnlabeledSet, weak: &AugmentPolicy, seed: u64) -> Result<Self> {
        Self::from_parts(&unlabeled.x, unlabeled.hidden(), Some(weak), seed)
    }

    /// Rows without augmentation.
    pub fn identity(x: &Tensor, labels: &[usize]) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Dimension(format!("{} rows for {} labels", x.rows(), labels.len())));
        }
        Ok(DiagnosticViews {
            x: x.clone(),
            labels: labels.to_vec(),
        })
    }

    fn from_parts(x: &Tensor, hidden: &HiddenLabels, weak: Option<&AugmentPolicy>, seed: u64) -> Result<Self> {
        let d = x.cols();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, y) in hidden.for_diagnostics().iter().enumerate() {
            let Some(y) = *y else { continue };
            let row = x.row(i);
            match weak {
                Some(w) => data.extend(w.apply(row, &mut rng::substream(seed, Stream::Diagnostics, i as u64))),
                None => data.extend_from_slice(row),
            }
            labels.push(y);
        }
        Ok(DiagnosticViews {
            x: Tensor::new(vec![labels.len(), d], data)?,
            labels,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAccuracy {
    /// Over every unlabeled sample.
    pub unfiltered: f64,
    /// Over samples with `max(p) >= tau` only; `None` when none pass.
    pub filtered: Option<f64>,
    pub n_filtered: usize,
}

/// Agreement of TPC pseudo-labels with hidden labels.
pub fn pseudo_label_accuracy_from(p: &Tensor, labels: &[usize], tau: f64) -> Result<PseudoLabelAccuracy> {
    let unfiltered = accuracy(p, labels)?;
    let (mut kept, mut hits) = (0usize, 0usize);
    for (row, &y) in p.row_iter().zip(labels) {
        if row.iter().copied().fold(f64::NEG_INFINITY, f64::max) >= tau {
            kept += 1;
            hits += (argmax(row) == y) as usize;
        }
    }
    Ok(PseudoLabelAccuracy {
        unfiltered,
        filtered: (kept > 0).then(|| hits as f64 / kept as f64),
        n_filtered: kept,
    })
}

pub fn pseudo_label_accuracy(model: &ModelParams, views: &DiagnosticViews, tau: f64) -> Result<PseudoLabelAccuracy> {
    pseudo_label_accuracy_from(&model.predict(&views.x)?, &views.labels, tau)
}

/// Class order by ascending probability; ties go to the higher index first,
/// so rank 1 matches the complementary-label rule.
pub fn ascending_rank(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)));
    order
}

/// Error of the rank-`m` complementary label for every `m` in `1..=C`.
/// Entry `m - 1` is the fraction of samples whose `m`-th smallest class is
/// the true class; the entries sum to 1.
pub fn complementary_error_all(p: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    if p.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", p.rows(), labels.len())));
    }
    let mut counts = vec![0usize; p.cols()];
    for (row, &y) in p.row_iter().zip(labels) {
        let rank = ascending_rank(row).iter().position(|&c| c == y).expect("label in range");
        counts[rank] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / labels.len() as f64).collect())
}

pub fn complementary_error(model: &ModelParams, views: &DiagnosticViews, m: usize) -> Result<f64> {
    let c = model.classes();
    if m == 0 || m > c {
        return Err(Error::Config(format!("m must lie in [1, {c}], got {m}")));
    }
    Ok(complementary_error_all(&model.predict(&views.x)?, &views.labels)?[m - 1])
}

/// Row-normalised `C x C` argmax rates per true class. Rows of classes with
/// no samples stay zero.
pub fn heatmap(p: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let c = p.cols();
    if p.rows() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", p.rows(), labels.len())));
    }
    let mut h = Tensor::zeros(&[c, c]);
    for (row, &y) in p.row_iter().zip(labels) {
        h.row_mut(y)[argmax(row)] += 1.0;
    }
    for y in 0..c {
        let row = h.row_mut(y);
        let n: f64 = row.iter().sum();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmaps {
    pub tpc: Tensor,
    pub tnc: Tensor,
}

pub fn prediction_heatmaps(model: &ModelParams, views: &DiagnosticViews) -> Result<Heatmaps> {
    let inf = model.infer(&views.x)?;
    Ok(Heatmaps {
        tpc: heatmap(&inf.p, &views.labels)?,
        tnc: heatmap(&inf.r, &views.labels)?,
    })
}

/// Mean diagonal entry over non-empty rows.
pub fn diagonal_mass(h: &Tensor) -> f64 {
    let (mut sum, mut rows) = (0.0, 0usize);
    for i in 0..h.rows() {
        if h.row(i).iter().any(|&v| v > 0.0) {
            sum += h.row(i)[i];
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        sum / rows as f64
    }
}

/// Diagnostics at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub test_accuracy: f64,
    pub pseudo_label: PseudoLabelAccuracy,
    /// Entry `m - 1` is the rank-`m` complementary error.
    pub complementary_error: Vec<f64>,
    pub tpc_diagonal: f64,
    pub tnc_diagonal: f64,
    #[serde(skip)]
    pub heatmaps: Option<Heatmaps>,
}

/// Runs every diagnostic; never mutates the model.
pub fn evaluate(model: &ModelParams, eval: &LabeledSet, views: &DiagnosticViews, tau: f64, step: usize) -> Result<EvalRecord> {
    let test_accuracy = test_accuracy(model, eval)?;
    let inf = model.infer(&views.x)?;
    let pseudo_label = pseudo_label_accuracy_from(&inf.p, &views.labels, tau)?;
    let complementary_error = complementary_error_all(&inf.p, &views.labels)?;
    let heatmaps = Heatmaps {
        tpc: heatmap(&inf.p, &views.labels)?,
        tnc: heatmap(&inf.r, &views.labels)?,
    };
    Ok(EvalRecord {
        step,
        test_accuracy,
        pseudo_label,
        complementary_error,
        tpc_diagonal: diagonal_mass(&heatmaps.tpc),
        tnc_diagonal: diagonal_mass(&heatmaps.tnc),
        heatmaps: Some(heatmaps),
    })
}

/// Eval records of one run in step order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticLog {
    pub records: Vec<EvalRecord>,
}

impl DiagnosticLog {
    pub fn push(&mut self, r: EvalRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub const SUMMARY_HEADER: &str = "step,test_accuracy,pseudo_label_accuracy,pseudo_label_accuracy_filtered,n_filtered,complementary_error_m1,tpc_diagonal,tnc_diagonal";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// One CSV line per eval record, values printed in shortest round-trip form.
pub fn summary_csv(log: &DiagnosticLog) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in &log.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            r.test_accuracy,
            r.pseudo_label.unfiltered,
            opt(r.pseudo_label.filtered),
            r.pseudo_label.n_filtered,
            r.complementary_error.first().copied().unwrap_or(0.0),
            r.tpc_diagonal,
            r.tnc_diagonal,
        ));
    }
    out
}

pub fn complementary_error_csv(log: &DiagnosticLog) -> String {
    let c = log.records.first().map_or(0, |r| r.complementary_error.len());
    let mut out = String::from("step");
    for m in 1..=c {
        out.push_str(&format!(",m{m}"));
    }
    out.push('\n');
    for r in &log.records {
        out.push_str(&r.step.to_string());
        for v in &r.complementary_error {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parses a numeric CSV matrix as written by [`matrix_csv`].
pub fn parse_matrix_csv(text: &str) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim().parse().map_err(|_| Error::Parse {
                    row: i + 1,
                    msg: format!("not a number: {c:?}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::from_rows(&refs)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Writes `metrics.jsonl`, `summary.csv`, `complementary_error.csv` and the
/// final heatmaps into `dir`.
pub fn export_report<S: Serialize>(dir: &Path, step_log: &[S], log: &DiagnosticLog) -> Result<()> {
    let last = log
        .last()
        .ok_or_else(|| Error::Usage("cannot export a report without eval records".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for s in step_log {
        let line = serde_json::to_string(s).map_err(|e| Error::Usage(format!("metric record: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    f.flush().map_err(|e| Error::io(&path, e))?;
    write(dir, "summary.csv", &summary_csv(log))?;
    write(dir, "complementary_error.csv", &complementary_error_csv(log))?;
    if let Some(h) = &last.heatmaps {
        write(dir, "heatmap_tpc.csv", &matrix_csv(&h.tpc))?;
        write(dir, "heatmap_tnc.csv", &matrix_csv(&h.tnc))?;
    }
    Ok(())
}
