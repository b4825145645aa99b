//! Loss terms of the dual-head objective and their ablation variants.
//!
//! Every loss here is a weighted log-likelihood of the form
//! `-(1/norm) * sum(T * log(p))`, where the constant target matrix `T`
//! already folds in pseudo-labels, confidence indicators and top-k gates.
//! Building `T` is pure and tested on its own; [`weighted_log_loss`] puts the
//! result on the tape.
//!
//! Normalisation is always by the full unlabeled batch size `mu * B`, never
//! by the number of retained samples, so an empty portion yields a zero loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{argmax, argmin, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Pseudo-label: index of the largest probability, lowest index on ties.
pub fn select_pseudo_label(p: &[f64]) -> usize {
    argmax(p)
}

/// Complementary label: index of the smallest probability, highest index on
/// ties. Never equals [`select_pseudo_label`] when there are two or more
/// classes, even for a uniform vector.
pub fn select_complementary_label(p: &[f64]) -> usize {
    argmin(p)
}

/// Split of an unlabeled batch by TPC confidence on the weak view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    high: Vec<bool>,
}

impl Partition {
    pub fn is_high(&self, n: usize) -> bool {
        self.high[n]
    }

    pub fn high_mask(&self) -> &[bool] {
        &self.high
    }

    pub fn low_mask(&self) -> Vec<bool> {
        self.high.iter().map(|h| !h).collect()
    }

    pub fn n_high(&self) -> usize {
        self.high.iter().filter(|&&h| h).count()
    }

    pub fn n_low(&self) -> usize {
        self.high.len() - self.n_high()
    }

    pub fn len(&self) -> usize {
        self.high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty()
    }
}

/// High portion is `max(p_w) >= tau`; the low portion is everything else.
pub fn confidence_partition(p_w: &Tensor, tau: f64) -> Result<Partition> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(Partition {
        high: p_w.max_rows().into_iter().map(|m| m >= tau).collect(),
    })
}

/// Binary gate over the `k` largest entries of one prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopKMask {
    g: Vec<bool>,
    k: usize,
}

impl TopKMask {
    pub fn gates(&self) -> &[bool] {
        &self.g
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Selects the `k` largest components; ties go to the lower index.
pub fn topk_mask(r: &[f64], k: usize) -> Result<TopKMask> {
    if k == 0 || k > r.len() {
        return Err(Error::Config(format!("k must lie in [1, {}], got {k}", r.len())));
    }
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    let mut g = vec![false; r.len()];
    for &i in &order[..k] {
        g[i] = true;
    }
    Ok(TopKMask { g, k })
}

/// `-(1/norm) * sum(targets * log(probs))` on the tape.
pub fn weighted_log_loss(tape: &mut Tape, probs: Var, targets: Tensor, norm: f64) -> Result<Var> {
    if !(norm > 0.0) {
        return Err(Error::Usage(format!("loss normaliser must be positive, got {norm}")));
    }
    let t = tape.constant(targets)?;
    let logp = tape.log(probs)?;
    let weighted = tape.mul(logp, t)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / norm)
}

/// One-hot rows for the given class per row; `None` rows stay all-zero.
pub fn one_hot_targets(rows: &[Option<usize>], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[rows.len(), classes]);
    for (n, y) in rows.iter().enumerate() {
        if let Some(y) = *y {
            if y >= classes {
                return Err(Error::Data(format!("label {y} outside [0, {classes})")));
            }
            t.row_mut(n)[y] = 1.0;
        }
    }
    Ok(t)
}

fn check_batch(a: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if a.rows() != rows || a.cols() != cols || !a.is_matrix() {
        return Err(Error::Dimension(format!(
            "{what}: expected [{rows}, {cols}], got {:?}",
            a.shape()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of labeled TPC predictions against their labels.
pub fn supervised_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = (tape.value(probs).rows(), tape.value(probs).cols());
    if labels.len() != b || b == 0 {
        return Err(Error::Dimension(format!("{} labels for {b} predictions", labels.len())));
    }
    let rows: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
    let t = one_hot_targets(&rows, c)?;
    weighted_log_loss(tape, probs, t, b as f64)
}

/// Cross-entropy of TNC weak-view predictions against the complementary
/// label, over every unlabeled sample. `r_w_live` must be computed on
/// detached features so only the TNC head learns from this term.
pub fn separation_loss(tape: &mut Tape, p_w: &Tensor, r_w_live: Var) -> Result<Var> {
    let targets: Vec<usize> = p_w.row_iter().map(select_complementary_label).collect();
    separation_loss_with_targets(tape, &targets, r_w_live)
}

pub fn separation_loss_with_targets(tape: &mut Tape, targets: &[usize], r_w_live: Var) -> Result<Var> {
    let (n, c) = (tape.value(r_w_live).rows(), tape.value(r_w_live).cols());
    if targets.len() != n || n == 0 {
        return Err(Error::Dimension(format!("{} targets for {n} predictions", targets.len())));
    }
    let rows: Vec<Option<usize>> = targets.iter().map(|&y| Some(y)).collect();
    weighted_log_loss(tape, r_w_live, one_hot_targets(&rows, c)?, n as f64)
}

/// Hard pseudo-label targets for `mask`ed rows.
pub fn masked_pseudo_targets(p_w: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let rows: Vec<Option<usize>> = p_w
        .row_iter()
        .zip(mask)
        .map(|(p, &keep)| keep.then(|| select_pseudo_label(p)))
        .collect();
    one_hot_targets(&rows, p_w.cols())
}

/// Hard pseudo-label consistency on the high-confidence portion.
pub fn positive_consistency_loss(tape: &mut Tape, p_w: &Tensor, p_s: Var, partition: &Partition) -> Result<Var> {
    check_batch(p_w, partition.len(), tape.value(p_s).cols(), "positive consistency p_w")?;
    check_batch(tape.value(p_s), partition.len(), p_w.cols(), "positive consistency p_s")?;
    let t = masked_pseudo_targets(p_w, partition.high_mask())?;
    weighted_log_loss(tape, p_s, t, partition.len() as f64)
}

/// How each selected TNC component is weighted in the negative consistency target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateWeight {
    /// The weak-view TNC probability itself.
    Soft,
    /// A constant 1 wherever the gate is open.
    Hard,
}

/// Target matrix of the negative consistency term.
///
/// Row `n` is zero unless `mask[n]`. Otherwise entry `i` is
/// `g_i * w_i / k`, where `g` is the top-`k` gate of `r_w[n]` and `w_i` is
/// either `r_w[n, i]` or 1. With `k == C` every component is selected and
/// the `1/k` factor is dropped, which makes the soft case exactly the full
/// soft cross-entropy `H(r_w, r_s)`.
pub fn negative_targets(r_w: &Tensor, mask: &[bool], k: usize, weight: GateWeight) -> Result<Tensor> {
    let c = r_w.cols();
    if k == 0 || k > c {
        return Err(Error::Config(format!("k must lie in [1, {c}], got {k}")));
    }
    if mask.len() != r_w.rows() {
        return Err(Error::Dimension(format!("{} mask entries for {} rows", mask.len(), r_w.rows())));
    }
    let scale = if k == c { 1.0 } else { 1.0 / k as f64 };
    let mut t = Tensor::zeros(&[r_w.rows(), c]);
    for (n, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let r = r_w.row(n);
        let gate = topk_mask(r, k)?;
        for (i, out) in t.row_mut(n).iter_mut().enumerate() {
            if gate.g[i] {
                let w = match weight {
                    GateWeight::Soft => r[i],
                    GateWeight::Hard => 1.0,
                };
                *out = w * scale;
            }
        }
    }
    Ok(t)
}

/// Top-k gated soft consistency between TNC weak and strong views on the
/// low-confidence portion.
pub fn negative_consistency_loss(
    tape: &mut Tape,
    r_w: &Tensor,
    r_s: Var,
    partition: &Partition,
    k: usize,
) -> Result<Var> {
    check_batch(r_w, partition.len(), tape.value(r_s).cols(), "negative consistency r_w")?;
    check_batch(tape.value(r_s), partition.len(), r_w.cols(), "negative consistency r_s")?;
    let t = negative_targets(r_w, &partition.low_mask(), k, GateWeight::Soft)?;
    weighted_log_loss(tape, r_s, t, partition.len() as f64)
}

/// Non-negative loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub sep: f64,
    pub p: f64,
    pub n: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            sep: 1.0,
            p: 1.0,
            n: 1.0,
        }
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_sep", self.sep), ("lambda_p", self.p), ("lambda_n", self.n)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative weight, got {v}")));
            }
        }
        Ok(())
    }

    /// `l_sup + sep*l_sep + p*l_p + n*l_n`, evaluated left to right.
    pub fn combine(&self, l_sup: f64, l_sep: f64, l_p: f64, l_n: f64) -> f64 {
        l_sup + self.sep * l_sep + self.p * l_p + self.n * l_n
    }
}

/// Values of every loss term for one step.
///
/// Under ablations the `l_sep` and `l_n` slots hold the variant that replaces
/// the separation and low-confidence terms respectively.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_sep: f64,
    pub l_p: f64,
    pub l_n: f64,
    pub lambdas: Lambdas,
    pub total: f64,
    pub n_high: usize,
    pub n_low: usize,
}

/// The four loss nodes of one step. Absent terms contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Components {
    pub l_sup: Option<Var>,
    pub l_sep: Option<Var>,
    pub l_p: Option<Var>,
    pub l_n: Option<Var>,
}

/// Weighted sum of the components on the tape plus the matching report.
///
/// Each weighted term is added to the running sum in the order sup, sep, p, n
/// so that the reported total equals [`Lambdas::combine`] of the reported
/// components bit for bit. Absent or zero-weighted terms are still added as
/// `lambda * value` to keep the graph shape independent of the weights.
pub fn total_loss(tape: &mut Tape, parts: Components, lambdas: Lambdas, partition: Option<&Partition>) -> Result<(Var, LossReport)> {
    lambdas.validate()?;
    let l_sup = parts
        .l_sup
        .ok_or_else(|| Error::Usage("total loss needs the supervised term".into()))?;
    let value = |tape: &Tape, v: Option<Var>| -> Result<f64> {
        v.map(|v| tape.value(v).item()).transpose().map(|x| x.unwrap_or(0.0))
    };
    let mut total = l_sup;
    for (term, w) in [(parts.l_sep, lambdas.sep), (parts.l_p, lambdas.p), (parts.l_n, lambdas.n)] {
        if let Some(term) = term {
            let scaled = tape.scale(term, w)?;
            total = tape.add(total, scaled)?;
        }
    }
    let report = LossReport {
        l_sup: value(tape, Some(l_sup))?,
        l_sep: value(tape, parts.l_sep)?,
        l_p: value(tape, parts.l_p)?,
        l_n: value(tape, parts.l_n)?,
        lambdas,
        total: tape.value(total).item()?,
        n_high: partition.map_or(0, Partition::n_high),
        n_low: partition.map_or(0, Partition::n_low),
    };
    Ok((total, report))
}

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $s),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of {:?}"),
                        other,
                        [$($s),+]
                    ))),
                }
            }
        }
    };
}

string_enum! {
    /// Ways of using the low-confidence portion with the TPC alone.
    LowConfMode {
        HardCe => "hard_ce",
        SoftCe => "soft_ce",
        FeatureMse => "feature_mse",
    }
}

string_enum! {
    /// Alternative TNC learning schemes.
    TncScheme {
        HardHard => "hard_hard",
        RandSoft => "rand_soft",
        RevNorm => "rev_norm",
    }
}

string_enum! {
    /// Alternative TNC consistency targets.
    TncConsistency {
        AllSamples => "all_samples",
        HardLabel => "hard_label",
    }
}

/// Inputs for the low-confidence ablations.
pub struct LowConfInputs<'a> {
    pub p_w: &'a Tensor,
    pub p_s: Var,
    pub z_w: &'a Tensor,
    pub z_s: Var,
}

/// Consistency on the low-confidence portion using the TPC (or features)
/// instead of the TNC.
///
/// * `hard_ce`: hard pseudo-label cross-entropy against `p_s`.
/// * `soft_ce`: `p_w` as a soft target for `p_s`.
/// * `feature_mse`: mean squared distance between `z_w` and `z_s`.
pub fn ablation_low_conf_loss(tape: &mut Tape, mode: LowConfMode, inputs: LowConfInputs<'_>, partition: &Partition) -> Result<Var> {
    let mu_b = partition.len() as f64;
    let low = partition.low_mask();
    match mode {
        LowConfMode::HardCe => {
            let t = masked_pseudo_targets(inputs.p_w, &low)?;
            weighted_log_loss(tape, inputs.p_s, t, mu_b)
        }
        LowConfMode::SoftCe => {
            let mut t = inputs.p_w.clone();
            for (n, &keep) in low.iter().enumerate() {
                if !keep {
                    t.row_mut(n).fill(0.0);
                }
            }
            weighted_log_loss(tape, inputs.p_s, t, mu_b)
        }
        LowConfMode::FeatureMse => {
            let z_s = tape.value(inputs.z_s);
            if !z_s.same_shape(inputs.z_w) || z_s.rows() != partition.len() {
                return Err(Error::Dimension(format!(
                    "feature_mse: z_w {:?} vs z_s {:?}",
                    inputs.z_w.shape(),
                    z_s.shape()
                )));
            }
            let d = z_s.cols() as f64;
            let mut weights = Tensor::zeros(z_s.shape());
            for (n, &keep) in low.iter().enumerate() {
                if keep {
                    weights.row_mut(n).fill(1.0 / d);
                }
            }
            let zw = tape.constant(inputs.z_w.clone())?;
            let diff = tape.sub(inputs.z_s, zw)?;
            let sq = tape.mul(diff, diff)?;
            let w = tape.constant(weights)?;
            let weighted = tape.mul(sq, w)?;
            let total = tape.sum(weighted)?;
            tape.scale(total, 1.0 / mu_b)
        }
    }
}

/// `(1 - r) / sum(1 - r)` per row.
pub fn rev_norm_target(r_w: &Tensor) -> Tensor {
    let mut q = r_w.map(|v| 1.0 - v);
    let c = q.cols();
    for row in q.data_mut().chunks_mut(c) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.fill(1.0 / c as f64);
        }
    }
    q
}

/// Uniformly random class other than the pseudo-label, per row.
pub fn rand_soft_targets<R: Rng + ?Sized>(p_w: &Tensor, rng: &mut R) -> Vec<usize> {
    let c = p_w.cols();
    p_w.row_iter()
        .map(|p| {
            let top = select_pseudo_label(p);
            let pick = rng.random_range(0..c - 1);
            if pick >= top {
                pick + 1
            } else {
                pick
            }
        })
        .collect()
}

/// Inputs shared by the TNC-scheme ablations.
pub struct TncInputs<'a> {
    pub p_w: &'a Tensor,
    pub r_w: &'a Tensor,
    /// TNC on detached weak features with live head parameters.
    pub r_w_live: Var,
    pub r_s: Var,
}

/// Replacement `(separation, consistency)` terms for a TNC learning scheme.
///
/// * `hard_hard`: default separation; consistency target `argmax(r_w)`.
/// * `rand_soft`: separation target drawn uniformly from the classes other
///   than `argmax(p_w)`; consistency target the full soft `r_w`.
/// * `rev_norm`: no separation term; consistency target `Norm(1 - r_w)`.
///
/// Consistency is always restricted to the low-confidence portion.
pub fn ablation_tnc_scheme<R: Rng + ?Sized>(
    tape: &mut Tape,
    mode: TncScheme,
    inputs: TncInputs<'_>,
    partition: &Partition,
    rng: &mut R,
) -> Result<(Option<Var>, Var)> {
    let mu_b = partition.len() as f64;
    let low = partition.low_mask();
    let masked = |t: Tensor| {
        let mut t = t;
        for (n, &keep) in low.iter().enumerate() {
            if !keep {
                t.row_mut(n).fill(0.0);
            }
        }
        t
    };
    match mode {
        TncScheme::HardHard => {
            let sep = separation_loss(tape, inputs.p_w, inputs.r_w_live)?;
            let t = masked(masked_pseudo_targets(inputs.r_w, &vec![true; partition.len()])?);
            let cons = weighted_log_loss(tape, inputs.r_s, t, mu_b)?;
            Ok((Some(sep), cons))
        }
        TncScheme::RandSoft => {
            let targets = rand_soft_targets(inputs.p_w, rng);
            let sep = separation_loss_with_targets(tape, &targets, inputs.r_w_live)?;
            let cons = weighted_log_loss(tape, inputs.r_s, masked(inputs.r_w.clone()), mu_b)?;
            Ok((Some(sep), cons))
        }
        TncScheme::RevNorm => {
            let cons = weighted_log_loss(tape, inputs.r_s, masked(rev_norm_target(inputs.r_w)), mu_b)?;
            Ok((None, cons))
        }
    }
}

/// Alternative negative consistency terms.
///
/// * `all_samples`: the top-k gated soft term without the confidence indicator.
/// * `hard_label`: the gated components of `r_w` replaced by 1, low portion only.
pub fn ablation_tnc_consistency(
    tape: &mut Tape,
    mode: TncConsistency,
    r_w: &Tensor,
    r_s: Var,
    partition: &Partition,
    k: usize,
) -> Result<Var> {
    let t = match mode {
        TncConsistency::AllSamples => negative_targets(r_w, &vec![true; partition.len()], k, GateWeight::Soft)?,
        TncConsistency::HardLabel => negative_targets(r_w, &partition.low_mask(), k, GateWeight::Hard)?,
    };
    weighted_log_loss(tape, r_s, t, partition.len() as f64)
}
