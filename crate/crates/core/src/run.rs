//! Run directories, manifests and ablation sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, TrainConfig};
use crate::data::{self, Dataset, SplitIndices, SplitSpec, Splits};
use crate::diffcore::ImageGeom;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalRecord};
use crate::model::{ModelParams, ModelSpec};
use crate::trainer::{self, FitOutcome};

/// Builds the dataset described by the data section of a config.
pub fn build_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match d.source {
        DataSource::Blobs => data::make_gaussian_blobs(d.classes, d.per_class, d.dim, d.separation, d.seed),
        DataSource::Rings => data::make_rings(d.classes, d.per_class, d.noise, d.seed),
        DataSource::Patterns => data::make_patterns(d.classes, d.per_class, d.side, d.noise, d.seed),
        DataSource::Csv => {
            let path = d
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("data.source=csv needs data.path".into()))?;
            let path = Path::new(path);
            if !path.exists() {
                return Err(Error::Data(format!("dataset file {} does not exist", path.display())));
            }
            let image = (d.side > 0 && cfg.model.conv_channels.is_some()).then_some(ImageGeom {
                channels: 1,
                height: d.side,
                width: d.side,
            });
            data::load_csv(path, d.has_header, Some(d.classes), image)
        }
    }
}

pub fn split_spec(cfg: &TrainConfig) -> SplitSpec {
    SplitSpec {
        labels_per_class: cfg.split.labels_per_class,
        seed: cfg.seed,
        eval_fraction: cfg.split.eval_fraction,
        unlabeled_includes_labeled: cfg.split.unlabeled_includes_labeled,
        standardize: cfg.split.standardize,
    }
}

/// Dataset, split and architecture for one run.
pub struct Prepared {
    pub dataset: Dataset,
    pub splits: Splits,
    pub spec: ModelSpec,
}

pub fn prepare(cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    let splits = data::make_split(&dataset, &split_spec(cfg))?;
    let spec = cfg.model_spec(dataset.dim(), dataset.classes(), dataset.image())?;
    Ok(Prepared {
        dataset,
        splits,
        spec,
    })
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Value,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_json(&self.config)
    }
}

/// Reads a config file, which may also be a run manifest. Returns the
/// manifest's dataset fingerprint when there is one.
pub fn load_config(path: &Path) -> Result<(TrainConfig, Option<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&text) {
        if obj.contains_key("dataset_fingerprint") && obj.contains_key("config") {
            let m: RunManifest = serde_json::from_value(Value::Object(obj))
                .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
            return Ok((m.train_config()?, Some(m.dataset_fingerprint)));
        }
    }
    Ok((TrainConfig::parse_text(&text)?, None))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Outcome of a training run written to disk.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub final_eval: EvalRecord,
    pub outcome: FitOutcome,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains one configuration into `dir`: manifest, split, streamed metric
/// log, report tables and best/final checkpoints.
pub fn run_training(cfg: &TrainConfig, dir: &Path, expected_fingerprint: Option<&str>) -> Result<RunResult> {
    let prepared = prepare(cfg)?;
    let fingerprint = prepared.dataset.fingerprint();
    if let Some(want) = expected_fingerprint {
        if want != fingerprint {
            return Err(Error::Data(format!(
                "dataset fingerprint {fingerprint} does not match manifest {want}"
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let artifacts: BTreeMap<String, String> = [
        ("split", "split.txt"),
        ("metrics", "metrics.jsonl"),
        ("summary", "summary.csv"),
        ("complementary_error", "complementary_error.csv"),
        ("heatmap_tpc", "heatmap_tpc.csv"),
        ("heatmap_tnc", "heatmap_tnc.csv"),
        ("checkpoint_best", "checkpoint_best.ckpt"),
        ("checkpoint_final", "checkpoint_final.ckpt"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let mut manifest = RunManifest {
        config: cfg.to_json(),
        dataset_fingerprint: fingerprint,
        seed: cfg.seed,
        artifacts,
        started_at: unix_now(),
        finished_at: None,
    };
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    let split_path = dir.join("split.txt");
    fs::write(&split_path, prepared.splits.indices.to_manifest()).map_err(|e| Error::io(&split_path, e))?;

    let model = ModelParams::init(&prepared.spec, cfg.seed)?;
    let log_path = dir.join("metrics.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut sink = |r: &trainer::StepRecord| -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::Usage(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };
    let fitted = trainer::fit_with_sink(model, &prepared.splits, cfg, &mut sink);
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log);
    let outcome = fitted.map_err(|abort| abort.error)?;

    let diag = &outcome.diagnostics;
    metrics::export_report(dir, &outcome.steps, diag)?;
    let standardizer = prepared.splits.standardizer.clone();
    let final_ckpt = Checkpoint {
        model: outcome.model.clone(),
        standardizer: standardizer.clone(),
        step: cfg.steps,
    };
    final_ckpt.save(&dir.join("checkpoint_final.ckpt"))?;
    if let Some(best) = &outcome.best {
        Checkpoint {
            model: best.model.clone(),
            standardizer,
            step: best.record.step,
        }
        .save(&dir.join("checkpoint_best.ckpt"))?;
    }
    manifest.finished_at = Some(unix_now());
    write_json(&manifest_path, &manifest)?;
    let final_eval = diag.last().cloned().expect("fit always evaluates at the end");
    Ok(RunResult {
        dir: dir.to_path_buf(),
        final_eval,
        outcome,
    })
}

/// Evaluates a checkpoint on the eval split of `cfg` (rebuilt from the
/// saved split when `split` is given).
pub fn evaluate_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig, split: Option<&SplitIndices>) -> Result<EvalRecord> {
    let dataset = build_dataset(cfg)?;
    if dataset.dim() != ckpt.model.spec().input_dim {
        return Err(Error::Dimension(format!(
            "dataset has {} features, checkpoint expects {}",
            dataset.dim(),
            ckpt.model.spec().input_dim
        )));
    }
    let spec = split_spec(cfg);
    let splits = match split {
        Some(idx) => data::materialize(&dataset, idx.clone(), &spec)?,
        None => data::make_split(&dataset, &spec)?,
    };
    let views = trainer::diagnostic_views(&splits, cfg)?;
    metrics::evaluate(&ckpt.model, &splits.eval, &views, cfg.tau, ckpt.step)
}

/// Keys an ablation sweep may vary.
pub const SWEEPABLE: &[&str] = &[
    "tau",
    "k",
    "lambda_sep",
    "lambda_p",
    "lambda_n",
    "lambda_ab1",
    "stop_gradient",
    "ablation.low_conf",
    "ablation.tnc_scheme",
    "ablation.tnc_consistency",
    "schedule",
    "lr0",
    "split.labels_per_class",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `KEY=v1,v2,...`.
pub fn parse_sweep(s: &str) -> Result<SweepAxis> {
    let (key, values) = crate::config::split_assignment(s)?;
    if !SWEEPABLE.contains(&key) {
        return Err(Error::Config(format!("key {key:?} cannot be swept; sweepable keys: {SWEEPABLE:?}")));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(Error::Config(format!("empty value in sweep {s:?}")));
    }
    Ok(SweepAxis {
        key: key.to_string(),
        values,
    })
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

/// Cartesian product of the axes; no axes gives one default point.
pub fn grid(axes: &[SweepAxis]) -> Vec<GridPoint> {
    let mut points = vec![GridPoint {
        label: String::new(),
        overrides: Vec::new(),
    }];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut o = p.overrides.clone();
                    o.push((axis.key.clone(), v.clone()));
                    GridPoint {
                        label: String::new(),
                        overrides: o,
                    }
                })
            })
            .collect();
    }
    for p in &mut points {
        p.label = if p.overrides.is_empty() {
            "default".to_string()
        } else {
            p.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
        };
    }
    points
}

fn point(label: &str, overrides: &[(&str, &str)]) -> GridPoint {
    GridPoint {
        label: label.to_string(),
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

pub const PRESETS: &[&str] = &["tb_ab", "k", "tau", "lr"];

/// Named study designs: component toggles, k intensity, threshold and
/// learning-rate schedule.
pub fn preset(name: &str) -> Result<Vec<GridPoint>> {
    let toggles = |label: &str, p: &str, n: &str, sep: &str, sg: &str| {
        point(
            label,
            &[("lambda_p", p), ("lambda_n", n), ("lambda_sep", sep), ("stop_gradient", sg)],
        )
    };
    Ok(match name {
        "tb_ab" => vec![
            toggles("i", "1", "1", "1", "false"),
            toggles("ii", "1", "0", "1", "false"),
            toggles("iii", "1", "0", "1", "true"),
            toggles("iv", "0", "1", "1", "true"),
            toggles("v", "1", "1", "0", "true"),
            toggles("vi", "0", "1", "0", "true"),
            toggles("vii", "1", "0", "0", "true"),
            toggles("viii", "0", "0", "0", "true"),
            toggles("default", "1", "1", "1", "true"),
        ],
        "k" => ["0.2C", "0.4C", "0.6C", "0.8C", "1.0C"]
            .iter()
            .map(|k| point(&format!("k={k}"), &[("k", k)]))
            .collect(),
        "tau" => ["0.5", "0.75", "0.95", "0.99"]
            .iter()
            .map(|t| point(&format!("tau={t}"), &[("tau", t)]))
            .collect(),
        "lr" => {
            let mut v = Vec::new();
            for schedule in ["constant", "cosine"] {
                for lr in ["0.03", "0.07", "0.10"] {
                    v.push(point(
                        &format!("schedule={schedule};lr0={lr}"),
                        &[("schedule", schedule), ("lr0", lr)],
                    ));
                }
            }
            v
        }
        other => return Err(Error::Config(format!("unknown preset {other:?}; presets: {PRESETS:?}"))),
    })
}

/// Worker count from `MUTEXMATCH_THREADS`, else the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("MUTEXMATCH_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSummary {
    pub label: String,
    pub overrides: Vec<(String, String)>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Runs every grid point for `seeds` consecutive seeds starting at the base
/// seed, `threads` runs at a time, and writes `comparison.csv` into `out`.
pub fn run_sweep(base: &TrainConfig, points: &[GridPoint], seeds: usize, out: &Path, threads: usize) -> Result<Vec<PointSummary>> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let mut jobs = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in &p.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        for s in 0..seeds {
            let mut c = cfg.clone();
            c.seed = base.seed + s as u64;
            let dir = out.join(format!("point-{pi:03}")).join(format!("seed-{}", c.seed));
            jobs.push((pi, c, dir));
        }
    }
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, cfg, dir)) = jobs.get(i) else { break };
                let r = run_training(cfg, dir, None).map(|r| r.final_eval.test_accuracy);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no poisoned workers");
    let mut summaries: Vec<PointSummary> = points
        .iter()
        .map(|p| PointSummary {
            label: p.label.clone(),
            overrides: p.overrides.clone(),
            accuracies: Vec::new(),
            mean: f64::NAN,
            std: f64::NAN,
        })
        .collect();
    for ((pi, _, _), r) in jobs.iter().zip(results) {
        let acc = r.expect("every job ran")?;
        summaries[*pi].accuracies.push(acc);
    }
    for s in &mut summaries {
        (s.mean, s.std) = mean_std(&s.accuracies);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("comparison.csv");
    fs::write(&path, comparison_csv(&summaries)).map_err(|e| Error::io(&path, e))?;
    Ok(summaries)
}

pub fn comparison_csv(summaries: &[PointSummary]) -> String {
    let mut out = String::from("point,label,seeds,mean_accuracy,std_accuracy\n");
    for (i, s) in summaries.iter().enumerate() {
        out.push_str(&format!(
            "point-{i:03},\"{}\",{},{},{}\n",
            s.label,
            s.accuracies.len(),
            s.mean,
            s.std
        ));
    }
    out
}
