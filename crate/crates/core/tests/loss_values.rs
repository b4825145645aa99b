use mutexmatch::diffcore::{Tape, Tensor};
use mutexmatch::mutexloss::{
    ablation_low_conf_loss, ablation_tnc_consistency, confidence_partition, negative_consistency_loss,
    positive_consistency_loss, rev_norm_target, separation_loss, supervised_loss, LowConfInputs, LowConfMode,
    TncConsistency,
};
use mutexmatch::trainer::cosine_lr;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
}

#[test]
fn supervised_cross_entropy() {
    let mut tape = Tape::new();
    let p = tape.constant(m(&[&[0.2, 0.5, 0.3]])).unwrap();
    let l = supervised_loss(&mut tape, p, &[1]).unwrap();
    let v = tape.value(l).item().unwrap();
    close(v, -(0.5f64).ln());
    close(v, 0.693147180559945);
}

#[test]
fn supervised_uniform_is_log_classes() {
    let c = 7;
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::filled(&[2, c], 1.0 / c as f64)).unwrap();
    let l = supervised_loss(&mut tape, p, &[3, 6]).unwrap();
    close(tape.value(l).item().unwrap(), (c as f64).ln());
}

#[test]
fn separation_targets_least_likely_class() {
    let mut tape = Tape::new();
    let r = tape.constant(m(&[&[0.1, 0.2, 0.7]])).unwrap();
    let l = separation_loss(&mut tape, &m(&[&[0.7, 0.2, 0.1]]), r).unwrap();
    let v = tape.value(l).item().unwrap();
    close(v, -(0.7f64).ln());
    close(v, 0.356674943938732);
}

#[test]
fn positive_consistency_normalises_by_full_batch() {
    let p_w = m(&[&[0.97, 0.02, 0.01], &[0.5, 0.3, 0.2]]);
    let part = confidence_partition(&p_w, 0.95).unwrap();
    let mut tape = Tape::new();
    let p_s = tape.constant(m(&[&[0.7, 0.2, 0.1], &[0.1, 0.1, 0.8]])).unwrap();
    let l = positive_consistency_loss(&mut tape, &p_w, p_s, &part).unwrap();
    let v = tape.value(l).item().unwrap();
    close(v, 0.5 * -(0.7f64).ln());
    close(v, 0.178337471969366);
}

#[test]
fn negative_consistency_top_two() {
    let p_w = m(&[&[0.4, 0.3, 0.2, 0.1]]);
    let part = confidence_partition(&p_w, 0.95).unwrap();
    let r_w = m(&[&[0.4, 0.3, 0.2, 0.1]]);
    let mut tape = Tape::new();
    let r_s = tape.constant(Tensor::filled(&[1, 4], 0.25)).unwrap();
    let l = negative_consistency_loss(&mut tape, &r_w, r_s, &part, 2).unwrap();
    let v = tape.value(l).item().unwrap();
    close(v, -0.5 * (0.4 + 0.3) * (0.25f64).ln());
    close(v, 0.485203026391962);
}

#[test]
fn hard_label_consistency_single_gate() {
    let p_w = m(&[&[0.5, 0.3, 0.2]]);
    let part = confidence_partition(&p_w, 0.95).unwrap();
    let r_w = m(&[&[0.1, 0.6, 0.3]]);
    let mut tape = Tape::new();
    let r_s = tape.constant(m(&[&[0.45, 0.25, 0.3]])).unwrap();
    let l = ablation_tnc_consistency(&mut tape, TncConsistency::HardLabel, &r_w, r_s, &part, 1).unwrap();
    let v = tape.value(l).item().unwrap();
    close(v, -(0.25f64).ln());
    close(v, 1.386294361119891);
}

#[test]
fn rev_norm_target_values() {
    let q = rev_norm_target(&m(&[&[0.5, 0.3, 0.2]]));
    let expected = [0.5 / 2.0, 0.7 / 2.0, 0.8 / 2.0];
    for (a, b) in q.data().iter().zip(expected) {
        close(*a, b);
    }
    for (a, b) in q.data().iter().zip([0.25, 0.35, 0.40]) {
        close(*a, b);
    }
    let u = rev_norm_target(&Tensor::filled(&[1, 4], 0.25));
    for v in u.data() {
        close(*v, 0.25);
    }
}

#[test]
fn soft_ce_ablation_with_uniform_target() {
    let c = 5;
    let p_w = Tensor::filled(&[2, c], 1.0 / c as f64);
    let part = confidence_partition(&p_w, 0.95).unwrap();
    let z = Tensor::zeros(&[2, 3]);
    let mut tape = Tape::new();
    let p_s = tape.constant(p_w.clone()).unwrap();
    let z_s = tape.constant(z.clone()).unwrap();
    let inputs = LowConfInputs {
        p_w: &p_w,
        p_s,
        z_w: &z,
        z_s,
    };
    let l = ablation_low_conf_loss(&mut tape, LowConfMode::SoftCe, inputs, &part).unwrap();
    close(tape.value(l).item().unwrap(), (c as f64).ln());
}

#[test]
fn cosine_schedule_final_factor() {
    let factor = (7.0 * std::f64::consts::PI / 16.0).cos();
    close(cosine_lr(100, 100, 1.0), factor);
    close(factor, 0.195090322016128);
    close(cosine_lr(0, 100, 0.03), 0.03);
}
