mod common;

use common::*;
use lomoe::model::Routing;
use lomoe::Rng;

#[test]
fn every_op_matches_central_differences() {
    for (name, err) in per_op_errors(11) {
        assert!(err <= 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn task_backbone_gradients_match_central_differences() {
    let mut m = tiny_task_model(3);
    perturb_zero_inits(&mut m, 4);
    unfreeze_all(&mut m);
    let s = random_sample(8, &[0, 3], &mut Rng::new(5));
    let rows = m.rows_of_step(2);
    let probes = model_gradient_probes(&mut m, &s, Routing::Stack(2), &rows, 20, 6);
    assert!(probes.iter().filter(|p| p.numeric.abs() > 1e-8).count() >= 15);
    for p in probes {
        let e = rel_err(p.analytic, p.numeric);
        assert!(e <= 1e-3, "{}[{}]: analytic {} numeric {} ({e:e})", p.name, p.index, p.analytic, p.numeric);
    }
}

#[test]
fn class_backbone_gradients_match_central_differences() {
    let mut m = tiny_class_model(7);
    perturb_zero_inits(&mut m, 8);
    unfreeze_all(&mut m);
    let s = random_sample(8, &[0, 1, 2, 3], &mut Rng::new(9));
    let rows = m.rows_upto(2);
    let probes = model_gradient_probes(&mut m, &s, Routing::Soft, &rows, 20, 10);
    assert!(probes.iter().filter(|p| p.numeric.abs() > 1e-8).count() >= 15);
    for p in probes {
        let e = rel_err(p.analytic, p.numeric);
        assert!(e <= 1e-3, "{}[{}]: analytic {} numeric {} ({e:e})", p.name, p.index, p.analytic, p.numeric);
    }
}
