//! Training configuration with flat `key=value` and JSON front ends.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::augment::AugmentConfig;
use crate::diffcore::ImageGeom;
use crate::error::{Error, Result};
use crate::model::{ConvSpec, ModelSpec};
use crate::mutexloss::{Lambdas, LowConfMode, TncConsistency, TncScheme};

/// Top-k intensity: an absolute count or a fraction of the class count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KSpec {
    Absolute(usize),
    FractionOfClasses(f64),
}

impl KSpec {
    /// Resolves against `classes`; fractions round to nearest, minimum 1.
    pub fn resolve(self, classes: usize) -> Result<usize> {
        let k = match self {
            KSpec::Absolute(k) => k,
            KSpec::FractionOfClasses(f) => ((f * classes as f64).round() as usize).max(1),
        };
        if k == 0 || k > classes {
            return Err(Error::Config(format!("k={self} resolves to {k}, outside [1, {classes}]")));
        }
        Ok(k)
    }
}

impl Default for KSpec {
    fn default() -> Self {
        KSpec::FractionOfClasses(1.0)
    }
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Absolute(k) => write!(f, "{k}"),
            KSpec::FractionOfClasses(x) if *x == 1.0 => f.write_str("C"),
            KSpec::FractionOfClasses(x) => write!(f, "{x}C"),
        }
    }
}

impl FromStr for KSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("k must be an integer or a fraction like 0.6C, got {s:?}"));
        if let Some(frac) = s.strip_suffix(['C', 'c']) {
            let f = if frac.is_empty() { 1.0 } else { frac.parse::<f64>().map_err(|_| bad())? };
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad());
            }
            return Ok(KSpec::FractionOfClasses(f));
        }
        s.parse::<usize>().map(KSpec::Absolute).map_err(|_| bad())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Dual-head objective with the negative classifier.
    MutexMatch,
    /// `L_sup + lambda_p * L_p` without the negative classifier.
    FixMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Blobs,
    Rings,
    Patterns,
    Csv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub low_conf: Option<LowConfMode>,
    pub tnc_scheme: Option<TncScheme>,
    pub tnc_consistency: Option<TncConsistency>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<String>,
    pub has_header: bool,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub side: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Blobs,
            path: None,
            has_header: false,
            classes: 10,
            per_class: 500,
            dim: 16,
            separation: 4.0,
            noise: 0.1,
            side: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub head_hidden: usize,
    pub conv_channels: Option<[usize; 2]>,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 128],
            head_hidden: 64,
            conv_channels: None,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub labels_per_class: usize,
    pub eval_fraction: f64,
    pub unlabeled_includes_labeled: bool,
    pub standardize: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            labels_per_class: 4,
            eval_fraction: 0.2,
            unlabeled_includes_labeled: true,
            standardize: true,
        }
    }
}

/// Every hyper-parameter of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub k: KSpec,
    pub mu: usize,
    pub batch_size: usize,
    pub lambdas: Lambdas,
    /// Weight of the low-confidence ablation term.
    pub lambda_ab1: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub stop_gradient: bool,
    /// Decay of an exponential moving average of the weights used for
    /// evaluation; 0 disables it.
    pub ema_decay: f64,
    pub objective: Objective,
    pub ablation: Ablation,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub split: SplitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.95,
            k: KSpec::default(),
            mu: 7,
            batch_size: 64,
            lambdas: Lambdas::default(),
            lambda_ab1: 1.0,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            steps: 5000,
            schedule: Schedule::Cosine,
            seed: 0,
            eval_every: 500,
            stop_gradient: true,
            ema_decay: 0.0,
            objective: Objective::MutexMatch,
            ablation: Ablation::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim().trim_start_matches('[').trim_end_matches(']');
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_optional<T: FromStr<Err = Error>>(value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" | "default" => Ok(None),
        v => v.parse().map(Some),
    }
}

impl TrainConfig {
    /// Every recognised key.
    pub const KEYS: &'static [&'static str] = &[
        "tau",
        "k",
        "mu",
        "batch_size",
        "lambda_sep",
        "lambda_p",
        "lambda_n",
        "lambda_ab1",
        "lr0",
        "momentum",
        "weight_decay",
        "steps",
        "schedule",
        "seed",
        "eval_every",
        "stop_gradient",
        "ema_decay",
        "objective",
        "ablation.low_conf",
        "ablation.tnc_scheme",
        "ablation.tnc_consistency",
        "model.hidden",
        "model.head_hidden",
        "model.conv_channels",
        "model.kernel",
        "augment.weak.sigma",
        "augment.strong.sigma",
        "augment.strong.dropout",
        "augment.strong.scale_lo",
        "augment.strong.scale_hi",
        "augment.image.n_ops",
        "augment.image.magnitude",
        "data.source",
        "data.path",
        "data.has_header",
        "data.classes",
        "data.per_class",
        "data.dim",
        "data.separation",
        "data.noise",
        "data.side",
        "data.seed",
        "split.labels_per_class",
        "split.eval_fraction",
        "split.unlabeled_includes_labeled",
        "split.standardize",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "tau" => self.tau = parse(key, v)?,
            "k" => self.k = v.parse()?,
            "mu" => self.mu = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lambda_sep" => self.lambdas.sep = parse(key, v)?,
            "lambda_p" => self.lambdas.p = parse(key, v)?,
            "lambda_n" => self.lambdas.n = parse(key, v)?,
            "lambda_ab1" => self.lambda_ab1 = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "schedule" => {
                self.schedule = match v.trim() {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    _ => return Err(Error::Config(format!("schedule must be cosine or constant, got {v:?}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "stop_gradient" => self.stop_gradient = parse_bool(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "objective" => {
                self.objective = match v.trim() {
                    "mutexmatch" => Objective::MutexMatch,
                    "fixmatch" => Objective::FixMatch,
                    _ => return Err(Error::Config(format!("objective must be mutexmatch or fixmatch, got {v:?}"))),
                }
            }
            "ablation.low_conf" => self.ablation.low_conf = parse_optional(v)?,
            "ablation.tnc_scheme" => self.ablation.tnc_scheme = parse_optional(v)?,
            "ablation.tnc_consistency" => self.ablation.tnc_consistency = parse_optional(v)?,
            "model.hidden" => self.model.hidden = parse_list(key, v)?,
            "model.head_hidden" => self.model.head_hidden = parse(key, v)?,
            "model.conv_channels" => {
                let c = parse_list(key, v)?;
                self.model.conv_channels = match c.as_slice() {
                    [] => None,
                    [a, b] => Some([*a, *b]),
                    _ => return Err(Error::Config(format!("model.conv_channels takes two values, got {v:?}"))),
                }
            }
            "model.kernel" => self.model.kernel = parse(key, v)?,
            "augment.weak.sigma" => self.augment.weak_sigma = parse(key, v)?,
            "augment.strong.sigma" => self.augment.strong_sigma = parse(key, v)?,
            "augment.strong.dropout" => self.augment.strong_dropout = parse(key, v)?,
            "augment.strong.scale_lo" => self.augment.strong_scale_lo = parse(key, v)?,
            "augment.strong.scale_hi" => self.augment.strong_scale_hi = parse(key, v)?,
            "augment.image.n_ops" => self.augment.image_n_ops = parse(key, v)?,
            "augment.image.magnitude" => self.augment.image_magnitude = parse(key, v)?,
            "data.source" => {
                self.data.source = match v.trim() {
                    "blobs" => DataSource::Blobs,
                    "rings" => DataSource::Rings,
                    "patterns" => DataSource::Patterns,
                    "csv" => DataSource::Csv,
                    _ => return Err(Error::Config(format!("unknown data.source {v:?}"))),
                }
            }
            "data.path" => self.data.path = Some(v.to_string()).filter(|p| !p.is_empty()),
            "data.has_header" => self.data.has_header = parse_bool(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.per_class" => self.data.per_class = parse(key, v)?,
            "data.dim" => self.data.dim = parse(key, v)?,
            "data.separation" => self.data.separation = parse(key, v)?,
            "data.noise" => self.data.noise = parse(key, v)?,
            "data.side" => self.data.side = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "split.labels_per_class" => self.split.labels_per_class = parse(key, v)?,
            "split.eval_fraction" => self.split.eval_fraction = parse(key, v)?,
            "split.unlabeled_includes_labeled" => self.split.unlabeled_includes_labeled = parse_bool(key, v)?,
            "split.standardize" => self.split.standardize = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = split_assignment(o.as_ref())?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Flat view of the configuration keyed by [`TrainConfig::KEYS`].
    pub fn to_json(&self) -> Value {
        let opt = |s: Option<&'static str>| s.map_or(Value::Null, Value::from);
        let pairs = [
            ("tau", json!(self.tau)),
            ("k", json!(self.k.to_string())),
            ("mu", json!(self.mu)),
            ("batch_size", json!(self.batch_size)),
            ("lambda_sep", json!(self.lambdas.sep)),
            ("lambda_p", json!(self.lambdas.p)),
            ("lambda_n", json!(self.lambdas.n)),
            ("lambda_ab1", json!(self.lambda_ab1)),
            ("lr0", json!(self.lr0)),
            ("momentum", json!(self.momentum)),
            ("weight_decay", json!(self.weight_decay)),
            ("steps", json!(self.steps)),
            (
                "schedule",
                json!(match self.schedule {
                    Schedule::Cosine => "cosine",
                    Schedule::Constant => "constant",
                }),
            ),
            ("seed", json!(self.seed)),
            ("eval_every", json!(self.eval_every)),
            ("stop_gradient", json!(self.stop_gradient)),
            ("ema_decay", json!(self.ema_decay)),
            (
                "objective",
                json!(match self.objective {
                    Objective::MutexMatch => "mutexmatch",
                    Objective::FixMatch => "fixmatch",
                }),
            ),
            ("ablation.low_conf", opt(self.ablation.low_conf.map(LowConfMode::as_str))),
            ("ablation.tnc_scheme", opt(self.ablation.tnc_scheme.map(TncScheme::as_str))),
            (
                "ablation.tnc_consistency",
                opt(self.ablation.tnc_consistency.map(TncConsistency::as_str)),
            ),
            ("model.hidden", json!(self.model.hidden)),
            ("model.head_hidden", json!(self.model.head_hidden)),
            ("model.conv_channels", json!(self.model.conv_channels)),
            ("model.kernel", json!(self.model.kernel)),
            ("augment.weak.sigma", json!(self.augment.weak_sigma)),
            ("augment.strong.sigma", json!(self.augment.strong_sigma)),
            ("augment.strong.dropout", json!(self.augment.strong_dropout)),
            ("augment.strong.scale_lo", json!(self.augment.strong_scale_lo)),
            ("augment.strong.scale_hi", json!(self.augment.strong_scale_hi)),
            ("augment.image.n_ops", json!(self.augment.image_n_ops)),
            ("augment.image.magnitude", json!(self.augment.image_magnitude)),
            (
                "data.source",
                json!(match self.data.source {
                    DataSource::Blobs => "blobs",
                    DataSource::Rings => "rings",
                    DataSource::Patterns => "patterns",
                    DataSource::Csv => "csv",
                }),
            ),
            ("data.path", json!(self.data.path)),
            ("data.has_header", json!(self.data.has_header)),
            ("data.classes", json!(self.data.classes)),
            ("data.per_class", json!(self.data.per_class)),
            ("data.dim", json!(self.data.dim)),
            ("data.separation", json!(self.data.separation)),
            ("data.noise", json!(self.data.noise)),
            ("data.side", json!(self.data.side)),
            ("data.seed", json!(self.data.seed)),
            ("split.labels_per_class", json!(self.split.labels_per_class)),
            ("split.eval_fraction", json!(self.split.eval_fraction)),
            ("split.unlabeled_includes_labeled", json!(self.split.unlabeled_includes_labeled)),
            ("split.standardize", json!(self.split.standardize)),
        ];
        Value::Object(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    /// Builds a configuration from a flat JSON object over the defaults.
    pub fn from_json(value: &Value) -> Result<TrainConfig> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config JSON must be an object".into()))?;
        let mut cfg = TrainConfig::default();
        cfg.merge_json(obj)?;
        Ok(cfg)
    }

    fn merge_json(&mut self, obj: &Map<String, Value>) -> Result<()> {
        for (key, v) in obj {
            let text = match v {
                Value::Null => String::new(),
                Value::String(s) => s.clone(),
                Value::Bool(b) => b.to_string(),
                Value::Number(n) => n.to_string(),
                Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                Value::Object(_) => {
                    return Err(Error::Config(format!("config key {key:?} must be flat, found a nested object")))
                }
            };
            self.set(key, &text)?;
        }
        Ok(())
    }

    /// Parses either a JSON object or `key=value` lines (`#` comments allowed).
    pub fn parse_text(text: &str) -> Result<TrainConfig> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
            return TrainConfig::from_json(&v);
        }
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line)?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse_text(&text)
    }

    /// Checks ranges and mode compatibility.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return cfg(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.mu == 0 || self.batch_size == 0 {
            return cfg("mu and batch_size must be at least 1".into());
        }
        self.lambdas.validate()?;
        if !(self.lambda_ab1 >= 0.0 && self.lambda_ab1.is_finite()) {
            return cfg(format!("lambda_ab1 must be a finite non-negative weight, got {}", self.lambda_ab1));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return cfg(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return cfg(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return cfg(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return cfg(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if self.split.labels_per_class == 0 {
            return cfg("split.labels_per_class must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.split.eval_fraction) || self.split.eval_fraction == 0.0 {
            return cfg(format!("split.eval_fraction must lie in (0, 1), got {}", self.split.eval_fraction));
        }
        if self.model.head_hidden == 0 || self.model.hidden.contains(&0) {
            return cfg("layer widths must be positive".into());
        }
        self.augment.validate()?;
        let a = &self.ablation;
        let tnc_modes = a.tnc_scheme.is_some() as usize + a.tnc_consistency.is_some() as usize;
        if tnc_modes > 1 {
            return cfg("ablation.tnc_scheme and ablation.tnc_consistency are mutually exclusive".into());
        }
        if a.low_conf.is_some() && tnc_modes > 0 {
            return cfg("ablation.low_conf removes the negative classifier and cannot be combined with TNC ablations".into());
        }
        if self.objective == Objective::FixMatch && (a.low_conf.is_some() || tnc_modes > 0) {
            return cfg("ablation modes apply to the mutexmatch objective only".into());
        }
        if self.data.source == DataSource::Csv && self.data.path.is_none() {
            return cfg("data.source=csv needs data.path".into());
        }
        if self.data.classes < 2 {
            return cfg(format!("data.classes must be at least 2, got {}", self.data.classes));
        }
        Ok(())
    }

    /// Model architecture for data of the given width and geometry.
    pub fn model_spec(&self, input_dim: usize, classes: usize, image: Option<ImageGeom>) -> Result<ModelSpec> {
        let mut spec = ModelSpec::mlp(input_dim, &self.model.hidden, self.model.head_hidden, classes);
        if let Some(channels) = self.model.conv_channels {
            let geom = image.ok_or_else(|| Error::Config("model.conv_channels needs image-shaped data".into()))?;
            spec.conv = Some(ConvSpec {
                geom,
                channels,
                kernel: self.model.kernel,
            });
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Splits `KEY=VALUE`.
pub fn split_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {s:?}")))
}

/// Key/value pairs that differ from the defaults, for labelling runs.
pub fn diff_from_default(cfg: &TrainConfig) -> BTreeMap<String, Value> {
    let base = TrainConfig::default().to_json();
    let cur = cfg.to_json();
    let (base, cur) = (base.as_object().expect("object"), cur.as_object().expect("object"));
    cur.iter()
        .filter(|(k, v)| base.get(*k) != Some(v))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_forms() {
        assert_eq!("3".parse::<KSpec>().unwrap().resolve(10).unwrap(), 3);
        assert_eq!("0.6C".parse::<KSpec>().unwrap().resolve(10).unwrap(), 6);
        assert_eq!("C".parse::<KSpec>().unwrap().resolve(10).unwrap(), 10);
        assert_eq!("0.01C".parse::<KSpec>().unwrap().resolve(10).unwrap(), 1);
        assert_eq!("0.25C".parse::<KSpec>().unwrap().resolve(10).unwrap(), 3);
        assert!("11".parse::<KSpec>().unwrap().resolve(10).is_err());
        assert!("0".parse::<KSpec>().unwrap().resolve(10).is_err());
        assert!("abc".parse::<KSpec>().is_err());
        assert!("1.5C".parse::<KSpec>().is_err());
    }

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.tau, c.mu, c.batch_size), (0.95, 7, 64));
        assert_eq!((c.lr0, c.momentum, c.weight_decay), (0.03, 0.9, 5e-4));
    }

    #[test]
    fn json_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_overrides(&["tau=0.5", "k=0.6C", "model.hidden=32,16", "ablation.tnc_scheme=rev_norm"])
            .unwrap();
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let keys: Vec<String> = c.to_json().as_object().unwrap().keys().cloned().collect();
        let mut expected: Vec<String> = TrainConfig::KEYS.iter().map(|s| s.to_string()).collect();
        expected.sort();
        assert_eq!(keys, expected);
    }

    #[test]
    fn unknown_key_names_it() {
        let err = TrainConfig::parse_text("tau=0.5\nbogus=1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(TrainConfig::parse_text("{\"nope\": 1}").is_err());
    }

    #[test]
    fn conflicting_ablations_rejected() {
        let mut c = TrainConfig::default();
        c.apply_overrides(&["ablation.tnc_scheme=hard_hard", "ablation.tnc_consistency=hard_label"])
            .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
