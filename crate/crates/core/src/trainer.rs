//! SGD training loop for the dual-head objective.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::config::{Ablation, Objective, Schedule, TrainConfig};
use crate::data::{BatchSampler, MixedBatch, Splits};
use crate::diffcore::{ops, Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{self, DiagnosticLog, DiagnosticViews, EvalRecord};
use crate::model::{Group, ModelParams};
use crate::mutexloss::{
    self, Components, Lambdas, LossReport, LowConfInputs, Partition, TncInputs,
};
use crate::rng::{self, Stream};

/// `lr0 * cos(7 pi s / (16 S))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (7.0 * PI * step as f64 / (16.0 * total as f64)).cos()
}

pub fn learning_rate(schedule: Schedule, step: usize, total: usize, lr0: f64) -> f64 {
    match schedule {
        Schedule::Cosine => cosine_lr(step, total, lr0),
        Schedule::Constant => lr0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
///
/// Every gradient is checked before anything is modified, so a non-finite
/// gradient leaves parameters and velocities untouched.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], velocity: &mut [Tensor], h: SgdHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) {
            return Err(Error::Dimension(format!("grad {i} has shape {:?}, param {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pj, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vj = h.momentum * *vj + gj + h.weight_decay * *pj;
            *pj -= h.lr * *vj;
        }
    }
    Ok(())
}

/// Momentum buffers mirroring the model's parameters plus a step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    step: usize,
}

impl OptimizerState {
    pub fn new(model: &ModelParams) -> Self {
        OptimizerState {
            velocity: model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update of the listed groups; counts as one optimizer step.
    pub fn apply(&mut self, model: &mut ModelParams, grads: &[Tensor], groups: &[Group], h: SgdHyper) -> Result<()> {
        if grads.len() != model.tensors().len() {
            return Err(Error::Dimension(format!("{} grads for {} params", grads.len(), model.tensors().len())));
        }
        for g in grads {
            if !g.all_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        for &group in groups {
            let r = model.group_range(group);
            sgd_step(
                &mut model.tensors_mut()[r.clone()],
                &grads[r.clone()],
                &mut self.velocity[r],
                h,
            )?;
        }
        self.step += 1;
        Ok(())
    }
}

/// Per-step loss settings resolved against the class count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub tau: f64,
    pub k: usize,
    pub lambdas: Lambdas,
    pub lambda_ab1: f64,
    pub stop_gradient: bool,
    pub objective: Objective,
    pub ablation: Ablation,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl StepConfig {
    pub fn from_config(cfg: &TrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(StepConfig {
            tau: cfg.tau,
            k: cfg.k.resolve(classes)?,
            lambdas: cfg.lambdas,
            lambda_ab1: cfg.lambda_ab1,
            stop_gradient: cfg.stop_gradient,
            objective: cfg.objective,
            ablation: cfg.ablation,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        })
    }

    pub fn uses_tnc(&self) -> bool {
        self.objective == Objective::MutexMatch && self.ablation.low_conf.is_none()
    }

    pub fn uses_unlabeled(&self) -> bool {
        let l = &self.lambdas;
        match (self.objective, self.ablation.low_conf) {
            (Objective::FixMatch, _) => l.p > 0.0,
            (_, Some(_)) => l.p > 0.0 || self.lambda_ab1 > 0.0,
            _ => l.p > 0.0 || l.n > 0.0 || l.sep > 0.0,
        }
    }

    fn has_separation(&self) -> bool {
        self.uses_tnc() && self.ablation.tnc_scheme != Some(mutexloss::TncScheme::RevNorm)
    }

    fn updated_groups(&self) -> &'static [Group] {
        if self.uses_tnc() {
            &[Group::Extractor, Group::Tpc, Group::Tnc]
        } else {
            &[Group::Extractor, Group::Tpc]
        }
    }
}

/// Forward, loss, backward and one SGD update on a single batch.
///
/// Weak-view predictions come from a gradient-free forward pass and enter the
/// graph as constants. The separation term sees the weak features as a
/// constant too unless `stop_gradient` is off, in which case the weak rows
/// join the live batch.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &MixedBatch,
    sc: &StepConfig,
    lr: f64,
    ablation_rng: &mut R,
) -> Result<LossReport> {
    let (b, u) = (batch.labels.len(), batch.unlabeled_index.len());
    let uses_tnc = sc.uses_tnc();
    let (z_w, p_w, r_w) = if uses_tnc {
        let inf = model.infer(&batch.unlabeled_weak)?;
        (inf.z, inf.p, Some(inf.r))
    } else {
        let z = model.infer_features(&batch.unlabeled_weak)?;
        let p = model.infer_head(Group::Tpc, &z)?;
        (z, p, None)
    };
    let partition = mutexloss::confidence_partition(&p_w, sc.tau)?;

    let mut tape = Tape::new();
    let frozen: &[Group] = if uses_tnc { &[] } else { &[Group::Tnc] };
    let vars = model.register(&mut tape, frozen)?;

    let unlabeled = sc.uses_unlabeled();
    let live_weak = unlabeled && sc.has_separation() && !sc.stop_gradient;
    let mut rows = vec![&batch.labeled_x];
    if unlabeled {
        rows.push(&batch.unlabeled_strong);
    }
    if live_weak {
        rows.push(&batch.unlabeled_weak);
    }
    let x = tape.constant(ops::concat_rows(&rows)?)?;
    let z = model.features_on(&mut tape, &vars, x)?;
    let z_ls = if live_weak { tape.slice_rows(z, 0, b + u)? } else { z };
    let p_ls = model.head_on(&mut tape, &vars, Group::Tpc, z_ls)?;
    let p_lb = if unlabeled { tape.slice_rows(p_ls, 0, b)? } else { p_ls };
    let mut parts = Components {
        l_sup: Some(mutexloss::supervised_loss(&mut tape, p_lb, &batch.labels)?),
        ..Components::default()
    };
    let mut lambdas = sc.lambdas;

    if unlabeled {
        let p_s = tape.slice_rows(p_ls, b, b + u)?;
        let z_s = tape.slice_rows(z, b, b + u)?;
        parts.l_p = Some(mutexloss::positive_consistency_loss(&mut tape, &p_w, p_s, &partition)?);
        match (sc.objective, sc.ablation.low_conf, r_w) {
            (Objective::FixMatch, _, _) => {
                lambdas.sep = 0.0;
                lambdas.n = 0.0;
            }
            (_, Some(mode), _) => {
                let inputs = LowConfInputs {
                    p_w: &p_w,
                    p_s,
                    z_w: &z_w,
                    z_s,
                };
                parts.l_n = Some(mutexloss::ablation_low_conf_loss(&mut tape, mode, inputs, &partition)?);
                lambdas.sep = 0.0;
                lambdas.n = sc.lambda_ab1;
            }
            (_, None, Some(r_w)) => {
                let z_w_t = if live_weak {
                    tape.slice_rows(z, b + u, b + 2 * u)?
                } else {
                    tape.constant(z_w)?
                };
                let zz = tape.concat_rows(&[z_w_t, z_s])?;
                let r_all = model.head_on(&mut tape, &vars, Group::Tnc, zz)?;
                let r_w_live = tape.slice_rows(r_all, 0, u)?;
                let r_s = tape.slice_rows(r_all, u, 2 * u)?;
                tnc_terms(&mut tape, sc, &mut parts, &p_w, &r_w, r_w_live, r_s, &partition, ablation_rng)?;
                if parts.l_sep.is_none() {
                    lambdas.sep = 0.0;
                }
            }
            (_, None, None) => unreachable!("TNC predictions are computed whenever the TNC is used"),
        }
    }

    let (total, report) = mutexloss::total_loss(&mut tape, parts, lambdas, Some(&partition))?;
    tape.backward(total)?;
    let grads = vars.grads(&tape);
    let hyper = SgdHyper {
        lr,
        momentum: sc.momentum,
        weight_decay: sc.weight_decay,
    };
    opt.apply(model, &grads, sc.updated_groups(), hyper)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn tnc_terms<R: Rng + ?Sized>(
    tape: &mut Tape,
    sc: &StepConfig,
    parts: &mut Components,
    p_w: &Tensor,
    r_w: &Tensor,
    r_w_live: crate::diffcore::Var,
    r_s: crate::diffcore::Var,
    partition: &Partition,
    rng: &mut R,
) -> Result<()> {
    match (sc.ablation.tnc_scheme, sc.ablation.tnc_consistency) {
        (Some(scheme), _) => {
            let inputs = TncInputs {
                p_w,
                r_w,
                r_w_live,
                r_s,
            };
            let (sep, cons) = mutexloss::ablation_tnc_scheme(tape, scheme, inputs, partition, rng)?;
            parts.l_sep = sep;
            parts.l_n = Some(cons);
        }
        (None, Some(mode)) => {
            parts.l_sep = Some(mutexloss::separation_loss(tape, p_w, r_w_live)?);
            parts.l_n = Some(mutexloss::ablation_tnc_consistency(tape, mode, r_w, r_s, partition, sc.k)?);
        }
        (None, None) => {
            parts.l_sep = Some(mutexloss::separation_loss(tape, p_w, r_w_live)?);
            parts.l_n = Some(mutexloss::negative_consistency_loss(tape, r_w, r_s, partition, sc.k)?);
        }
    }
    Ok(())
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Optimizer steps completed, starting at 1.
    pub step: usize,
    pub lr: f64,
    pub l_sup: f64,
    pub l_sep: f64,
    pub l_p: f64,
    pub l_n: f64,
    pub total: f64,
    pub n_high: usize,
    pub n_low: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalRecord>,
}

impl StepRecord {
    fn new(step: usize, lr: f64, r: &LossReport) -> Self {
        StepRecord {
            step,
            lr,
            l_sup: r.l_sup,
            l_sep: r.l_sep,
            l_p: r.l_p,
            l_n: r.l_n,
            total: r.total,
            n_high: r.n_high,
            n_low: r.n_low,
            eval: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub model: ModelParams,
    pub record: EvalRecord,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Final evaluation model: the weight average when `ema_decay > 0`.
    pub model: ModelParams,
    /// Parameters at the eval point with the highest test accuracy.
    pub best: Option<Snapshot>,
    pub steps: Vec<StepRecord>,
    pub diagnostics: DiagnosticLog,
}

/// A failed run, with everything logged before the failure.
#[derive(Debug, thiserror::Error)]
#[error("training aborted at step {step}: {error}")]
pub struct FitAbort {
    pub error: Error,
    pub step: usize,
    pub steps: Vec<StepRecord>,
    pub diagnostics: DiagnosticLog,
}

/// Views used by every eval point of a run.
pub fn diagnostic_views(splits: &Splits, cfg: &TrainConfig) -> Result<DiagnosticViews> {
    let weak = AugmentPolicy::weak(&cfg.augment, &splits.feature_std, splits.image)?;
    DiagnosticViews::new(&splits.unlabeled, &weak, cfg.seed)
}

pub fn fit(model: ModelParams, splits: &Splits, cfg: &TrainConfig) -> std::result::Result<FitOutcome, Box<FitAbort>> {
    fit_with_sink(model, splits, cfg, &mut |_| Ok(()))
}

/// Runs `cfg.steps` optimizer steps, evaluating every `eval_every` steps and
/// after the last one. `sink` sees each metric record as soon as it exists.
/// `shadow <- decay * shadow + (1 - decay) * model`.
pub fn ema_update(shadow: &mut ModelParams, model: &ModelParams, decay: f64) {
    for (s, m) in shadow.tensors_mut().iter_mut().zip(model.tensors()) {
        for (a, b) in s.data_mut().iter_mut().zip(m.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

pub fn fit_with_sink(
    mut model: ModelParams,
    splits: &Splits,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> std::result::Result<FitOutcome, Box<FitAbort>> {
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut diagnostics = DiagnosticLog::default();
    let abort = |error, step, steps, diagnostics| {
        Box::new(FitAbort {
            error,
            step,
            steps,
            diagnostics,
        })
    };
    let setup = (|| {
        let sc = StepConfig::from_config(cfg, splits.classes)?;
        if model.spec().input_dim != splits.labeled.x.cols() || model.classes() != splits.classes {
            return Err(Error::Dimension("model does not match the data".into()));
        }
        let weak = AugmentPolicy::weak(&cfg.augment, &splits.feature_std, splits.image)?;
        let strong = AugmentPolicy::strong(&cfg.augment, &splits.feature_std, splits.image)?;
        let sampler = BatchSampler::new(
            &splits.labeled,
            &splits.unlabeled,
            cfg.batch_size,
            cfg.mu,
            weak,
            strong,
            cfg.seed,
        )?;
        let views = diagnostic_views(splits, cfg)?;
        Ok((sc, sampler, views))
    })();
    let (sc, mut sampler, views) = match setup {
        Ok(s) => s,
        Err(e) => return Err(abort(e, 0, steps, diagnostics)),
    };
    let mut opt = OptimizerState::new(&model);
    let mut ema = (cfg.ema_decay > 0.0).then(|| model.clone());
    let mut ablation_rng: ChaCha8Rng = rng::stream(cfg.seed, Stream::Ablation);
    let mut best: Option<Snapshot> = None;
    let consider = |model: &ModelParams, record: &EvalRecord, best: &mut Option<Snapshot>| {
        if best.as_ref().is_none_or(|b| record.test_accuracy > b.record.test_accuracy) {
            *best = Some(Snapshot {
                model: model.clone(),
                record: record.clone(),
            });
        }
    };

    if cfg.steps == 0 {
        match metrics::evaluate(&model, &splits.eval, &views, cfg.tau, 0) {
            Ok(r) => {
                consider(&model, &r, &mut best);
                diagnostics.push(r);
            }
            Err(e) => return Err(abort(e, 0, steps, diagnostics)),
        }
    }
    for s in 0..cfg.steps {
        let lr = learning_rate(cfg.schedule, s, cfg.steps, cfg.lr0);
        let batch = sampler.next_batch();
        let report = match train_step(&mut model, &mut opt, &batch, &sc, lr, &mut ablation_rng) {
            Ok(r) => r,
            Err(e) => return Err(abort(e, s + 1, steps, diagnostics)),
        };
        if let Some(shadow) = ema.as_mut() {
            ema_update(shadow, &model, cfg.ema_decay);
        }
        let mut record = StepRecord::new(s + 1, lr, &report);
        let done = s + 1;
        if done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let eval_model = ema.as_ref().unwrap_or(&model);
            match metrics::evaluate(eval_model, &splits.eval, &views, cfg.tau, done) {
                Ok(r) => {
                    consider(eval_model, &r, &mut best);
                    record.eval = Some(r.clone());
                    diagnostics.push(r);
                }
                Err(e) => return Err(abort(e, done, steps, diagnostics)),
            }
        }
        if let Err(e) = sink(&record) {
            return Err(abort(e, done, steps, diagnostics));
        }
        steps.push(record);
    }
    Ok(FitOutcome {
        model: ema.unwrap_or(model),
        best,
        steps,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.03), 0.03);
        assert!((cosine_lr(100, 100, 1.0) - 0.195_090_322_016_128_3).abs() < 1e-12);
        assert_eq!(learning_rate(Schedule::Constant, 50, 100, 0.1), 0.1);
    }

    #[test]
    fn sgd_hand_trace() {
        let h = SgdHyper {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = vec![t(1.0)];
        let mut v = vec![t(0.0)];
        sgd_step(&mut p, &[t(1.0)], &mut v, h).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(v[0].data()[0], 1.0);
        sgd_step(&mut p, &[t(1.0)], &mut v, h).unwrap();
        assert!((v[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_without_mutation() {
        let h = SgdHyper {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = vec![t(1.0), t(2.0)];
        let mut v = vec![t(0.0), t(0.0)];
        let err = sgd_step(&mut p, &[t(1.0), t(f64::NAN)], &mut v, h).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p[0].data()[0], 1.0);
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let h = SgdHyper {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = vec![t(3.0)];
        let mut v = vec![t(0.0)];
        sgd_step(&mut p, &[t(0.0)], &mut v, h).unwrap();
        assert_eq!(p[0].data()[0], 3.0);
    }
}
