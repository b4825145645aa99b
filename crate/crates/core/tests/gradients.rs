mod common;

use common::{all_kinds, analytic, gradient_check, group_max_abs, LossKind, Toy};
use mutexmatch::model::Group;

#[test]
fn every_loss_matches_finite_differences() {
    for seed in [1, 2, 3] {
        let toy = Toy::new(seed);
        for kind in all_kinds() {
            let err = gradient_check(&toy, kind);
            assert!(err <= 1e-4, "seed {seed} {kind:?}: relative error {err:e}");
        }
    }
}

#[test]
fn separation_leaves_extractor_untouched() {
    for seed in 0..5 {
        let toy = Toy::new(seed);
        let (_, grads) = analytic(&toy, LossKind::Sep);
        assert_eq!(group_max_abs(&toy.model, &grads, Group::Extractor), 0.0);
        assert_eq!(group_max_abs(&toy.model, &grads, Group::Tpc), 0.0);
        assert!(group_max_abs(&toy.model, &grads, Group::Tnc) > 1e-6);
    }
}

#[test]
fn live_separation_reaches_extractor() {
    let toy = Toy::new(4);
    let (_, grads) = analytic(&toy, LossKind::SepLive);
    assert!(group_max_abs(&toy.model, &grads, Group::Extractor) > 1e-6);
}

#[test]
fn positive_consistency_never_touches_tnc() {
    let toy = Toy::new(5);
    let (_, grads) = analytic(&toy, LossKind::Pos);
    assert_eq!(group_max_abs(&toy.model, &grads, Group::Tnc), 0.0);
    assert!(group_max_abs(&toy.model, &grads, Group::Extractor) > 0.0);
}

#[test]
fn negative_consistency_never_touches_tpc() {
    let toy = Toy::new(6);
    let (_, grads) = analytic(&toy, LossKind::Neg(2));
    assert_eq!(group_max_abs(&toy.model, &grads, Group::Tpc), 0.0);
    assert!(group_max_abs(&toy.model, &grads, Group::Extractor) > 0.0);
}
