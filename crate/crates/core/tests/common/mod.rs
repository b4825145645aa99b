#![allow(dead_code)]

use mutexmatch::diffcore::{finite_difference_grad, max_relative_error, ops, Tape, Tensor, Var};
use mutexmatch::model::{Group, ModelParams, ModelSpec, ModelVars};
use mutexmatch::mutexloss::{
    self, LowConfInputs, LowConfMode, Partition, TncConsistency, TncInputs, TncScheme,
};
use mutexmatch::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASSES: usize = 4;

/// Small dual-head model with a fixed mixed batch and frozen weak-view outputs.
pub struct Toy {
    pub model: ModelParams,
    pub labeled_x: Tensor,
    pub labels: Vec<usize>,
    pub weak_x: Tensor,
    pub strong_x: Tensor,
    pub z_w: Tensor,
    pub p_w: Tensor,
    pub r_w: Tensor,
    pub partition: Partition,
    pub tau: f64,
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Random probability rows.
pub fn random_probs(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(rows, cols, rng).map(|v| (2.0 * v).exp());
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        t.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    t
}

impl Toy {
    /// Threshold at the median confidence so both portions are populated.
    pub fn new(seed: u64) -> Toy {
        let spec = ModelSpec::mlp(6, &[8], 5, CLASSES);
        let model = ModelParams::init(&spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labeled_x = random_tensor(3, 6, &mut rng);
        let labels = (0..3).map(|_| rng.random_range(0..CLASSES)).collect();
        let weak_x = random_tensor(6, 6, &mut rng);
        let mut strong_x = weak_x.map(|v| v * 1.1);
        for v in strong_x.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let inf = model.infer(&weak_x).unwrap();
        let mut conf = inf.p.max_rows();
        conf.sort_by(f64::total_cmp);
        let tau = 0.5 * (conf[2] + conf[3]);
        let partition = mutexloss::confidence_partition(&inf.p, tau).unwrap();
        assert!(partition.n_high() > 0 && partition.n_low() > 0);
        Toy {
            model,
            labeled_x,
            labels,
            weak_x,
            strong_x,
            z_w: inf.z,
            p_w: inf.p,
            r_w: inf.r,
            partition,
            tau,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    Sup,
    Sep,
    /// Separation with live weak features (no stop-gradient on the extractor).
    SepLive,
    Pos,
    Neg(usize),
    Total(usize),
    LowConf(LowConfMode),
    Scheme(TncScheme),
    Consistency(TncConsistency, usize),
}

pub fn all_kinds() -> Vec<LossKind> {
    let mut v = vec![
        LossKind::Sup,
        LossKind::Sep,
        LossKind::SepLive,
        LossKind::Pos,
        LossKind::Neg(2),
        LossKind::Neg(CLASSES),
        LossKind::Total(2),
        LossKind::Total(CLASSES),
    ];
    v.extend(LowConfMode::ALL.iter().map(|&m| LossKind::LowConf(m)));
    v.extend(TncScheme::ALL.iter().map(|&m| LossKind::Scheme(m)));
    for &m in TncConsistency::ALL {
        v.push(LossKind::Consistency(m, 2));
        v.push(LossKind::Consistency(m, CLASSES));
    }
    v
}

struct Live {
    vars: ModelVars,
    p_lb: Var,
    p_s: Var,
    z_s: Var,
    r_s: Var,
    r_w_detached: Var,
    r_w_live: Var,
}

fn forward(tape: &mut Tape, toy: &Toy, model: &ModelParams) -> Result<Live> {
    let vars = model.register(tape, &[])?;
    let (b, u) = (toy.labels.len(), toy.weak_x.rows());
    let x = tape.constant(ops::concat_rows(&[&toy.labeled_x, &toy.strong_x, &toy.weak_x])?)?;
    let z = model.features_on(tape, &vars, x)?;
    let p = model.head_on(tape, &vars, Group::Tpc, z)?;
    let r = model.head_on(tape, &vars, Group::Tnc, z)?;
    let zw_const = tape.constant(toy.z_w.clone())?;
    let r_w_detached = model.head_on(tape, &vars, Group::Tnc, zw_const)?;
    Ok(Live {
        vars,
        p_lb: tape.slice_rows(p, 0, b)?,
        p_s: tape.slice_rows(p, b, b + u)?,
        z_s: tape.slice_rows(z, b, b + u)?,
        r_s: tape.slice_rows(r, b, b + u)?,
        r_w_detached,
        r_w_live: tape.slice_rows(r, b + u, b + 2 * u)?,
    })
}

/// Builds the loss on the tape for `model`, with weak-view quantities frozen.
pub fn build_loss(tape: &mut Tape, toy: &Toy, model: &ModelParams, kind: LossKind) -> Result<(Var, ModelVars)> {
    let l = forward(tape, toy, model)?;
    let vars = l.vars.clone();
    let loss = loss_from(tape, toy, &l, kind)?;
    Ok((loss, vars))
}

fn loss_from(tape: &mut Tape, toy: &Toy, l: &Live, kind: LossKind) -> Result<Var> {
    let part = &toy.partition;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    match kind {
        LossKind::Sup => mutexloss::supervised_loss(tape, l.p_lb, &toy.labels),
        LossKind::Sep => mutexloss::separation_loss(tape, &toy.p_w, l.r_w_detached),
        LossKind::SepLive => mutexloss::separation_loss(tape, &toy.p_w, l.r_w_live),
        LossKind::Pos => mutexloss::positive_consistency_loss(tape, &toy.p_w, l.p_s, part),
        LossKind::Neg(k) => mutexloss::negative_consistency_loss(tape, &toy.r_w, l.r_s, part, k),
        LossKind::Total(k) => {
            let parts = mutexloss::Components {
                l_sup: Some(mutexloss::supervised_loss(tape, l.p_lb, &toy.labels)?),
                l_sep: Some(mutexloss::separation_loss(tape, &toy.p_w, l.r_w_detached)?),
                l_p: Some(mutexloss::positive_consistency_loss(tape, &toy.p_w, l.p_s, part)?),
                l_n: Some(mutexloss::negative_consistency_loss(tape, &toy.r_w, l.r_s, part, k)?),
            };
            let lambdas = mutexloss::Lambdas {
                sep: 0.7,
                p: 1.3,
                n: 0.9,
            };
            Ok(mutexloss::total_loss(tape, parts, lambdas, Some(part))?.0)
        }
        LossKind::LowConf(mode) => {
            let inputs = LowConfInputs {
                p_w: &toy.p_w,
                p_s: l.p_s,
                z_w: &toy.z_w,
                z_s: l.z_s,
            };
            mutexloss::ablation_low_conf_loss(tape, mode, inputs, part)
        }
        LossKind::Scheme(mode) => {
            let inputs = TncInputs {
                p_w: &toy.p_w,
                r_w: &toy.r_w,
                r_w_live: l.r_w_detached,
                r_s: l.r_s,
            };
            let (sep, cons) = mutexloss::ablation_tnc_scheme(tape, mode, inputs, part, &mut rng)?;
            match sep {
                Some(sep) => tape.add(sep, cons),
                None => Ok(cons),
            }
        }
        LossKind::Consistency(mode, k) => {
            mutexloss::ablation_tnc_consistency(tape, mode, &toy.r_w, l.r_s, part, k)
        }
    }
}

pub fn with_tensors(model: &ModelParams, tensors: &[Tensor]) -> ModelParams {
    let named = model.names().iter().cloned().zip(tensors.iter().cloned()).collect();
    ModelParams::from_named(model.spec(), named).unwrap()
}

/// Loss value and analytic gradients for every parameter.
pub fn analytic(toy: &Toy, kind: LossKind) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let (loss, vars) = build_loss(&mut tape, toy, &toy.model, kind).unwrap();
    let value = tape.value(loss).item().unwrap();
    tape.backward(loss).unwrap();
    (value, vars.grads(&tape))
}

pub fn numeric(toy: &Toy, kind: LossKind, step: f64) -> Vec<Tensor> {
    let f = |params: &[Tensor]| -> Result<f64> {
        let m = with_tensors(&toy.model, params);
        let mut tape = Tape::new();
        let (loss, _) = build_loss(&mut tape, toy, &m, kind)?;
        tape.value(loss).item()
    };
    finite_difference_grad(f, toy.model.tensors(), step).unwrap()
}

/// Relative error of analytic against central-difference gradients.
pub fn gradient_check(toy: &Toy, kind: LossKind) -> f64 {
    let (_, a) = analytic(toy, kind);
    let n = numeric(toy, kind, 1e-6);
    max_relative_error(&a, &n, 1e-3)
}

pub fn group_max_abs(model: &ModelParams, grads: &[Tensor], group: Group) -> f64 {
    model.group_range(group).map(|i| grads[i].max_abs()).fold(0.0, f64::max)
}
