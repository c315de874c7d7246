//! Shared helpers for the integration and acceptance targets.
#![allow(dead_code)]

use lomoe::gating::{add_class_expert, add_expert, ExpertInit, HashEmbedder};
use lomoe::model::{GateConfig, Mode, ModelConfig, Routing, SegBackbone};
use lomoe::train::seg_loss_graph;
use lomoe::data::Sample;
use lomoe::{Rng, Tape, Tensor, Var};

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng, scale: f64) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal() * scale).collect()).unwrap()
}

/// Worst relative error of the tape gradient of `sum(op(inputs) * w)`
/// against central differences, with `w` a fixed random weighting.
pub fn op_gradient_error(
    inputs: &[Tensor<f64>],
    op: impl Fn(&mut Tape<f64>, &[Var]) -> lomoe::Result<Var>,
    seed: u64,
) -> f64 {
    let eval = |xs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone()).unwrap()).collect();
        let out = op(&mut tape, &vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut rng = Rng::new(seed);
                let n: usize = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| rng.normal()).collect()).unwrap()
            }
        };
        let wv = tape.constant(w.clone()).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let value = tape.value(loss).data()[0];
        let g = tape.backward(loss).unwrap();
        let grads = vars.iter().zip(xs).map(|(&v, x)| g.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))).collect();
        (value, grads, w)
    };
    let (_, grads, w) = eval(inputs, None);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let n = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * h);
            worst = worst.max(rel_err(grads[i].data()[j], n));
        }
    }
    worst
}

/// Segmentation loss of one sample evaluated entirely in f64.
pub fn loss_f64(model: &SegBackbone, sample: &Sample, routing: Routing, rows: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let f = model.forward(&mut tape, &sample.image, routing, rows, true).unwrap();
    let loss = seg_loss_graph(&mut tape, f.logits, &sample.mask, &f.classes).unwrap();
    tape.value(loss).data()[0]
}

pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the f64 tape gradient of the segmentation loss with central
/// differences on `picks` randomly chosen trainable scalars. Parameters are
/// stored in f32, so the step actually taken is measured after rounding.
pub fn model_gradient_probes(
    model: &mut SegBackbone,
    sample: &Sample,
    routing: Routing,
    rows: &[usize],
    picks: usize,
    seed: u64,
) -> Vec<GradProbe> {
    let analytic = {
        let mut tape = Tape::<f64>::new();
        let f = model.forward(&mut tape, &sample.image, routing, rows, true).unwrap();
        let loss = seg_loss_graph(&mut tape, f.logits, &sample.mask, &f.classes).unwrap();
        tape.backward(loss).unwrap().into_params()
    };
    let names: Vec<(String, usize)> =
        model.params().iter().filter(|p| p.trainable).map(|p| (p.name.clone(), p.numel())).collect();
    let mut rng = Rng::new(seed);
    let h = 1e-4f64;
    let mut out = Vec::with_capacity(picks);
    for _ in 0..picks {
        let (name, numel) = names[rng.below(names.len())].clone();
        let index = rng.below(numel);
        let set = |model: &mut SegBackbone, v: f32| {
            let mut ps = model.params_mut();
            let p = ps.iter_mut().find(|p| p.name == name).unwrap();
            p.value.data_mut()[index] = v;
        };
        let orig = model.params().iter().find(|p| p.name == name).unwrap().value.data()[index];
        let up = (orig as f64 + h) as f32;
        let down = (orig as f64 - h) as f32;
        set(model, up);
        let lp = loss_f64(model, sample, routing, rows);
        set(model, down);
        let lm = loss_f64(model, sample, routing, rows);
        set(model, orig);
        let numeric = (lp - lm) / (up as f64 - down as f64);
        let a = analytic.get(&name).map_or(0.0, |g| g.data()[index]);
        out.push(GradProbe { name, index, analytic: a, numeric });
    }
    out
}

/// Replaces the zero-initialised tensors (expert `B`, head rows) with small
/// random values so every parameter influences the loss.
pub fn perturb_zero_inits(model: &mut SegBackbone, seed: u64) {
    let mut rng = Rng::new(seed);
    for p in model.params_mut() {
        if p.name.ends_with(".B") || p.name.starts_with("head.") {
            for v in p.value.data_mut() {
                *v = (rng.normal() * 0.5) as f32;
            }
        }
    }
}

/// Unfreezes every tensor on the tape; the patch embedding is a fixed
/// projection applied before the tape and stays frozen.
pub fn unfreeze_all(model: &mut SegBackbone) {
    for p in model.params_mut() {
        p.trainable = p.name != "embed.patch";
    }
}

/// Tiny two-block task-level model with two experts and both head groups.
pub fn tiny_task_model(seed: u64) -> SegBackbone {
    let mut m = SegBackbone::new(ModelConfig::tiny(), Mode::Task, None, seed).unwrap();
    let root = Rng::new(seed);
    add_expert(&mut m, ExpertInit::Fresh, &root).unwrap();
    m.add_head_rows(1, &[0, 1, 2]).unwrap();
    add_expert(&mut m, ExpertInit::Fresh, &root).unwrap();
    m.add_head_rows(2, &[0, 3]).unwrap();
    m
}

/// Tiny two-block class-level model with two prompted experts.
pub fn tiny_class_model(seed: u64) -> SegBackbone {
    let gate = GateConfig { d_txt: 8, ..GateConfig::default() };
    let mut m = SegBackbone::new(ModelConfig::tiny(), Mode::Class, Some(gate), seed).unwrap();
    let root = Rng::new(seed);
    let embed = HashEmbedder::new(8);
    add_class_expert(&mut m, "organs", &embed, ExpertInit::Fresh, &root).unwrap();
    m.add_head_rows(1, &[0, 1, 2]).unwrap();
    add_class_expert(&mut m, "lesion", &embed, ExpertInit::Fresh, &root).unwrap();
    m.add_head_rows(2, &[3]).unwrap();
    m
}

/// Random image with a mask using `classes`.
pub fn random_sample(size: usize, classes: &[u16], rng: &mut Rng) -> Sample {
    let image = Tensor::matrix(size, size, (0..size * size).map(|_| rng.uniform() as f32).collect()).unwrap();
    let mask = (0..size * size).map(|_| classes[rng.below(classes.len())]).collect();
    Sample::new(image, mask).unwrap()
}

/// Central-difference error of every differentiable tape operation.
pub fn per_op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut m = |r, c| random_matrix(r, c, &mut rng, 1.0);
    let (a, b, sq) = (m(3, 4), m(3, 4), m(4, 5));
    let (row, col, kt) = (m(1, 4), m(3, 1), m(5, 4));
    let (q, k) = (m(3, 4), m(5, 4));
    let p = m(6, 5);
    let v = m(5, 4);
    let pos = a.map(|x| x.abs() + 0.5);
    let den = b.map(|x| x.abs() + 0.5);
    type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> lomoe::Result<Var>>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![a.clone(), sq], Box::new(|t, x| t.matmul(x[0], x[1]))),
        ("matmul_nt", vec![a.clone(), kt], Box::new(|t, x| t.matmul_nt(x[0], x[1]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, x| t.mul(x[0], x[1]))),
        ("div", vec![a.clone(), den], Box::new(|t, x| t.div(x[0], x[1]))),
        ("add_row", vec![a.clone(), row], Box::new(|t, x| t.add_row(x[0], x[1]))),
        ("mul_col", vec![a.clone(), col], Box::new(|t, x| t.mul_col(x[0], x[1]))),
        ("scale", vec![a.clone()], Box::new(|t, x| t.scale(x[0], -1.7))),
        ("add_scalar", vec![a.clone()], Box::new(|t, x| t.add_scalar(x[0], 0.3))),
        ("gelu", vec![a.clone()], Box::new(|t, x| t.gelu(x[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|t, x| t.sigmoid(x[0]))),
        ("ln", vec![pos], Box::new(|t, x| t.ln(x[0]))),
        ("softmax_rows", vec![a.clone()], Box::new(|t, x| t.softmax_rows(x[0]))),
        ("log_softmax_rows", vec![a.clone()], Box::new(|t, x| t.log_softmax_rows(x[0]))),
        ("layer_norm_rows", vec![a.clone()], Box::new(|t, x| t.layer_norm_rows(x[0], 1e-5))),
        ("sum_all", vec![a.clone()], Box::new(|t, x| t.sum_all(x[0]))),
        ("sum_rows", vec![a.clone()], Box::new(|t, x| t.sum_rows(x[0]))),
        ("column", vec![a.clone()], Box::new(|t, x| t.column(x[0], 2))),
        ("concat_rows", vec![a.clone(), b.clone()], Box::new(|t, x| t.concat_rows(&[x[0], x[1]]))),
        ("reshape", vec![a.clone()], Box::new(|t, x| t.reshape(x[0], [4, 3]))),
        ("gather_rows", vec![a.clone()], Box::new(|t, x| t.gather_rows(x[0], &[2, 0, 2]))),
        ("scatter_rows", vec![a.clone()], Box::new(|t, x| t.scatter_rows(x[0], &[4, 1, 3], 5))),
        ("head_scores", vec![q, k], Box::new(|t, x| t.head_scores(x[0], x[1], 2, 0.5))),
        ("head_mix", vec![p, v], Box::new(|t, x| t.head_mix(x[0], x[1], 2))),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, op))| (name, op_gradient_error(&inputs, op, seed + i as u64)))
        .collect()
}
